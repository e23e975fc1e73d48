"""Exception types shared across the package."""


class DomainError(ValueError):
    """A state, input, or parameter left its admissible set."""


class SingularityError(RuntimeError):
    """A kinematic map became numerically singular (e.g. pitch near +-pi/2)."""


class DivergenceError(RuntimeError):
    """Integration produced a state far outside any physical envelope."""


class InsufficientHistoryError(ValueError):
    """An estimator was queried before enough samples were collected."""


class RankDeficiencyError(ValueError):
    """A matrix that must have full rank does not."""


class ArtifactError(RuntimeError):
    """A serialized artifact is missing, corrupt, or has the wrong schema."""


class ConfigError(ValueError):
    """A config file failed schema validation (unknown key, bad type/shape)."""
