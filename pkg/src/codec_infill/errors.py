"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`CodecInfillError`
so callers (and the CLI) can map failure classes to distinct exit codes.
"""


class CodecInfillError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CodecInfillError):
    """An argument violates an operation's precondition."""


class InvalidSpanError(InvalidInputError):
    """Spans overlap, are unsorted, or fall outside the frame range."""


class StructureError(CodecInfillError):
    """A rearranged or stacked sequence violates the layout grammar.

    Carries ``item_index``, the first offending item position.
    """

    def __init__(self, message: str, item_index: int):
        super().__init__(f"{message} (item {item_index})")
        self.item_index = item_index


class VocabularyError(CodecInfillError):
    """A token or symbol id is outside its vocabulary."""


class CapacityError(CodecInfillError):
    """A sequence exceeds the model's position capacity."""


class AlignmentError(CodecInfillError):
    """An edit operation references a word with no alignment entry."""


class ConfigError(CodecInfillError):
    """A configuration value is missing or invalid; names the field."""


class NumericalError(CodecInfillError):
    """Training or evaluation produced a non-finite value."""


class NonFiniteLossError(NumericalError):
    """The training loss became NaN/Inf; carries the offending batch id."""

    def __init__(self, message: str, batch_id: str):
        super().__init__(f"{message} (batch {batch_id})")
        self.batch_id = batch_id
