"""Exception types shared across the package."""


class GuidelabError(Exception):
    """Base class for every package-specific error."""


class MissingConditionError(GuidelabError, KeyError):
    """A condition key has no entry in the model or oracle."""


class InvalidStateError(GuidelabError, ValueError):
    """Operation applied to a sequence/prefix in the wrong state (e.g. already terminated)."""


class InvalidArgumentError(GuidelabError, ValueError):
    """Malformed argument: out-of-range ids, non-terminated sequence where one is required."""


class TooLargeSpaceError(GuidelabError):
    """Exhaustive enumeration would exceed the configured leaf guard."""


class InvalidPatternError(GuidelabError, ValueError):
    """A lexical pattern is empty or contains the EOS token."""


class InfeasibleOracleError(GuidelabError):
    """No sequence of positive base probability satisfies the oracle."""


class InfeasiblePrefixError(GuidelabError):
    """The prefix cannot be completed to a satisfying sequence (success rate is zero)."""


class InfeasibleSoftSpecError(GuidelabError):
    """The requested satisfying mass is incompatible with a degenerate base rate."""


class InfeasibleGuidanceError(GuidelabError):
    """The guided step distribution has zero total mass."""


class NonFiniteLossError(GuidelabError):
    """Training produced a non-finite loss; aborted with diagnostics."""


class ConfigError(GuidelabError):
    """Experiment configuration failed validation; message carries the field path."""
