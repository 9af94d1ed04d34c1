from pydantic import BaseModel, Field


class DatasetSummary(BaseModel):
    total_sites: int = 0
    total_requests: int = 0
    first_party_domain: int = 0
    first_party_subdomain: int = 0
    third_party: int = 0
    positive_sites: int | None = None
    positive_requests: int | None = None

    def share(self, count: int) -> float:
        if self.total_requests == 0:
            return 0.0
        return count / self.total_requests

    def rows(self) -> list[dict[str, object]]:
        """Rows in the shape of the published crawl summary table."""
        rows: list[dict[str, object]] = [
            {
                "metric": "3rd party requests",
                "count": self.third_party,
                "share": round(self.share(self.third_party), 4),
            },
            {
                "metric": "1st party requests (domain)",
                "count": self.first_party_domain,
                "share": round(self.share(self.first_party_domain), 4),
            },
            {
                "metric": "1st party requests (subdomain)",
                "count": self.first_party_subdomain,
                "share": round(self.share(self.first_party_subdomain), 4),
            },
            {"metric": "Total requests", "count": self.total_requests, "share": 1.0},
            {"metric": "Total sites", "count": self.total_sites, "share": None},
        ]
        if self.positive_sites is not None:
            rows.append(
                {"metric": "Cloaking sites", "count": self.positive_sites, "share": None}
            )
        if self.positive_requests is not None:
            rows.append(
                {
                    "metric": "Cloaking requests",
                    "count": self.positive_requests,
                    "share": round(self.share(self.positive_requests), 4),
                }
            )
        return rows


class SummaryDeviation(BaseModel):
    metric: str
    expected: int
    observed: int
    relative_error: float = Field(ge=0)
