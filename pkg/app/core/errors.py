EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4


class CloakwatchError(Exception):
    exit_code: int = 1

    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


class ConfigError(CloakwatchError):
    exit_code = EXIT_CONFIG


class DataError(CloakwatchError):
    exit_code = EXIT_DATA


class InputFileError(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, detail: str, *, line_no: int | None = None) -> None:
        if line_no is not None:
            detail = f"line {line_no}: {detail}"
        super().__init__(detail)
        self.line_no = line_no


class UrlError(DataError):
    pass


class ResolveError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class EmptySiteError(DataError):
    pass


class DegenerateDataError(DataError):
    pass


class TooFewInstancesError(DataError):
    pass


class ModelError(CloakwatchError):
    exit_code = EXIT_MODEL


class SchemaMismatchError(ModelError):
    pass


class InvalidParamsError(ModelError):
    pass


class NotSupportedError(ModelError):
    pass
