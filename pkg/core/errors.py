# Structured errors raised by the core modules; the CLI maps them to exit codes.


class HopGraphError(Exception):
    """Base class for every error raised by the library."""


class ShapeError(HopGraphError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MaskError(HopGraphError):
    """A masked reduction was asked to reduce a slice with no unmasked entries."""


class NonFiniteError(HopGraphError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"{op}: non-finite value{': ' + detail if detail else ''}")


class TapeError(HopGraphError):
    pass


class ConfigError(HopGraphError):
    pass


class DataError(HopGraphError):
    pass


class ParseError(DataError):
    def __init__(self, path, line_no: int, detail: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {detail}")


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class VerificationError(HopGraphError):
    pass
