from typing import Any, Dict, Optional


class CsftError(Exception):
    pass


class ShapeError(CsftError):
    pass


class ContractError(CsftError):
    pass


class ConfigurationError(CsftError):
    pass


class EmptyDatasetError(CsftError):
    pass


class MissingArtifactError(CsftError):
    def __init__(self, path: str, hint: str = ""):
        self.path = str(path)
        message = f"missing artifact {self.path}"
        if hint:
            message += f" (run `{hint}` first)"
        super().__init__(message)


class TrainingDivergedError(CsftError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} [{details}]" if details else message)
