"""Exception types shared across the package.

Each error maps to one failure class so the CLI can translate them into
stable exit codes.
"""


class FewdocError(Exception):
    """Base class for all library errors."""


# -- corpus ------------------------------------------------------------

class ParseError(FewdocError):
    """Input file is not valid JSON."""


class SchemaError(FewdocError):
    """Input parses but violates the corpus/task schema or an invariant."""


class EmptyCorpus(FewdocError):
    """Corpus contains no documents."""


class InfeasibleConfig(FewdocError):
    """Synthetic-generation config cannot produce valid documents."""


# -- sampler -----------------------------------------------------------

class ClassPoolTooSmall(FewdocError):
    """Fewer classes available than the requested task width."""


class TaskInfeasible(FewdocError):
    """Candidate documents exhausted before the shot target was met."""


class DatasetInfeasible(FewdocError):
    """Retry budget exhausted while sampling an episode dataset."""


# -- parameter stores --------------------------------------------------

class InvalidArch(FewdocError):
    """Architecture config with nonpositive sizes or no layers."""


class TokenOutOfVocab(FewdocError):
    """Document token id not covered by the embedding table."""


class ShapeMismatch(FewdocError):
    """Upstream gradient shape does not match the forward output."""


class LayoutMismatch(FewdocError):
    """Flat parameter vectors have incompatible layouts."""


# -- meta-learning -----------------------------------------------------

class EmptyClass(FewdocError):
    """A target class has no unmasked support token."""


class NoOtdTokens(FewdocError):
    """No unmasked background token in the support set."""


class MissingOtdPrototype(FewdocError):
    """Background prototype requested but not computed."""


class NonFinite(FewdocError):
    """NaN or infinity encountered in a numeric input."""


class NonPsd(FewdocError):
    """Regularized covariance failed its positive-definiteness check."""


class NonFiniteLoss(FewdocError):
    """Training loss became NaN or infinite."""


# -- evaluation --------------------------------------------------------

class SingleClass(FewdocError):
    """AUROC undefined: only one class present among scored tokens."""


# -- cli ---------------------------------------------------------------

class ConfigError(FewdocError):
    """Invalid run configuration (bad flag value or config field)."""
