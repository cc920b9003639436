"""Exception taxonomy.

Every error raised by the package derives from :class:`StyleFilterError` and
carries an ``exit_code`` that the CLI uses verbatim: 2 for configuration
problems, 3 for bad input data, 4 for backend/checkpoint failures.
"""

from __future__ import annotations


class StyleFilterError(Exception):
    exit_code = 1

    def __init__(self, message: str = "", **context):
        super().__init__(message)
        self.context = dict(context)

    @property
    def triplet_id(self):
        return self.context.get("triplet_id")

    def tag(self, **context) -> "StyleFilterError":
        """Attach extra context (e.g. the triplet being scored) and return self."""
        self.context.update(context)
        return self

    def summary(self) -> dict:
        out = {"error": type(self).__name__, "message": str(self)}
        out.update({k: v for k, v in self.context.items() if v is not None})
        return out

    def __str__(self) -> str:
        msg = super().__str__()
        tid = self.context.get("triplet_id")
        if tid is not None and tid not in msg:
            msg = f"[triplet {tid}] {msg}"
        return msg


class ConfigError(StyleFilterError):
    exit_code = 2


class DataError(StyleFilterError):
    exit_code = 3


class BackendError(StyleFilterError):
    exit_code = 4


# -- data errors -------------------------------------------------------------

class MalformedLine(DataError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}", line_no=line_no)
        self.line_no = line_no


class DuplicateId(DataError):
    def __init__(self, triplet_id: str, line_no: int | None = None):
        where = f" on line {line_no}" if line_no is not None else ""
        super().__init__(f"duplicate triplet_id {triplet_id!r}{where}",
                         triplet_id=triplet_id, line_no=line_no)
        self.line_no = line_no


class InconsistentGroup(DataError):
    def __init__(self, group_id: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(
            f"group {group_id!r} mixes different content/style paths{where}",
            group_id=group_id, line_no=line_no)
        self.group_id = group_id
        self.line_no = line_no


class IoError(DataError):
    pass


class DecodeError(DataError):
    pass


class EmptyCaption(DataError):
    pass


class EmptyGroup(DataError):
    pass


class InsufficientLabels(DataError):
    pass


class LabelMissingInKeys(DataError):
    pass


class NoPositivePair(DataError):
    pass


class MissingOutput(DataError):
    pass


class NonFiniteLoss(DataError):
    def __init__(self, batch_index: int, stage: str = ""):
        super().__init__(f"non-finite loss at batch {batch_index}"
                         + (f" ({stage})" if stage else ""), batch_index=batch_index)
        self.batch_index = batch_index


# -- backend errors ----------------------------------------------------------

class BackendUnavailable(BackendError):
    pass


class DimensionMismatch(BackendError):
    pass


class CheckpointCorrupt(BackendError):
    pass


class CacheCorrupt(StyleFilterError):
    """Raised internally when a cache entry fails its checksum."""
