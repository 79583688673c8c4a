"""Exception hierarchy.

Every error carries a stable ``exit_code`` used by the CLI.  Codes are grouped
by module: 10-19 ingest, 20-29 p2, 30-39 squash, 40-49 align, 50-59 labels,
60-69 cli/run configuration.
"""


class TraverseError(Exception):
    exit_code = 1


# ingest


class IngestError(TraverseError):
    exit_code = 10


class BadMagic(IngestError):
    exit_code = 11

    def __init__(self, path, found, expected, offset=0):
        self.path, self.offset = path, offset
        super().__init__(f"{path}: bad magic {found!r} at byte {offset}, expected {expected!r}")


class TruncatedFile(IngestError):
    exit_code = 12

    def __init__(self, path, offset, needed):
        self.path, self.offset = path, offset
        super().__init__(f"{path}: truncated at byte {offset} ({needed} more bytes needed)")


class NonFinitePoint(IngestError):
    exit_code = 13

    def __init__(self, path, offset, index):
        self.path, self.offset, self.index = path, offset, index
        super().__init__(f"{path}: non-finite coordinate in record {index} at byte {offset}")


class MalformedRecord(IngestError):
    exit_code = 14

    def __init__(self, path, line_no, reason):
        self.path, self.line_no = path, line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class NonMonotonicArclength(IngestError):
    exit_code = 15


class NoFramesInWindow(IngestError):
    exit_code = 16


class ManifestError(IngestError):
    exit_code = 17


class ManifestEmpty(ManifestError):
    exit_code = 18


# p2


class TooFewTraversals(TraverseError):
    exit_code = 20


# squash


class EmptyAfterCropping(TraverseError):
    exit_code = 30


class SpecMismatch(TraverseError):
    exit_code = 31


# align


class DimensionMismatch(TraverseError):
    exit_code = 40


class EmptyBatch(TraverseError):
    exit_code = 41


class DatasetTooSmall(TraverseError):
    exit_code = 42


# labels


class EmptyInput(TraverseError):
    exit_code = 50


class LengthMismatch(TraverseError):
    exit_code = 51


# cli


class ConfigError(TraverseError):
    exit_code = 60
