"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses for it, and a short
machine-readable ``code`` string that ends up in the stderr error JSON.
"""


class VickamError(Exception):
    exit_code = 1
    code = "error"

    def __init__(self, message, path=None):
        super().__init__(message)
        self.message = message
        self.path = None if path is None else str(path)

    def to_json(self):
        out = {"code": self.code, "message": self.message}
        if self.path is not None:
            out["path"] = self.path
        return out


class UsageError(VickamError):
    exit_code = 2
    code = "usage"


class FormatError(VickamError, ValueError):
    exit_code = 3
    code = "format"


class ShapeError(VickamError, ValueError):
    exit_code = 4
    code = "shape"


class NumericError(VickamError, ArithmeticError):
    exit_code = 5
    code = "numeric"
