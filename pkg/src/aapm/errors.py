"""Domain errors raised across the package.

Every error carries a module-qualified ``code`` so the CLI can report
failures uniformly (``schema/ManifestParse``, ``align/ZeroGamma``, ...).
"""


class AapmError(Exception):
    """Base class for all domain errors."""

    module = "aapm"

    @property
    def code(self) -> str:
        return f"{self.module}/{type(self).__name__}"


# -- schema -----------------------------------------------------------------

class ManifestParse(AapmError):
    module = "schema"


class SchemaViolation(AapmError):
    module = "schema"


class CountOverflow(AapmError):
    module = "schema"


class InsufficientCategories(AapmError):
    module = "schema"


class InsufficientSamples(AapmError):
    module = "schema"


# -- encoder ----------------------------------------------------------------

class SourceUnavailable(AapmError):
    module = "encoder"


class DimensionMismatch(AapmError):
    module = "encoder"


class UnknownCategory(AapmError):
    module = "encoder"


class IoFailure(AapmError):
    module = "encoder"


class HashMismatch(AapmError):
    module = "encoder"


class BasisConstruction(AapmError):
    module = "encoder"


# -- tcm --------------------------------------------------------------------

class MixedAttributes(AapmError):
    module = "tcm"


class WidthMismatch(AapmError):
    module = "tcm"


class NonFiniteGradient(AapmError):
    module = "tcm"


class CheckpointFormat(AapmError):
    module = "tcm"


# -- align ------------------------------------------------------------------

class ZeroVector(AapmError):
    module = "align"


class ZeroGamma(AapmError):
    module = "align"


# -- fewshot ----------------------------------------------------------------

class RaggedSupport(AapmError):
    module = "fewshot"


class DivergedLoss(AapmError):
    module = "fewshot"


# -- aam --------------------------------------------------------------------

class MissingAnnotation(AapmError):
    module = "aam"


class CountMismatch(AapmError):
    module = "aam"


class InvalidSpec(AapmError):
    module = "aam"


class DecodeFailure(AapmError):
    module = "aam"


# -- bench ------------------------------------------------------------------

class EmptyResults(AapmError):
    module = "bench"
