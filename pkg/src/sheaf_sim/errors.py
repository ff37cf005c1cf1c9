"""Exception types raised across the simulator."""


class SheafSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SheafSimError, ValueError):
    """Invalid experiment configuration."""


class EmptyModalitySet(ConfigError):
    pass


class InvalidEdge(ConfigError):
    pass


class DisconnectedSubgraph(ConfigError):
    """A modality-induced subgraph is not connected."""

    def __init__(self, modality, components):
        self.modality = modality
        self.components = [list(c) for c in components]
        super().__init__(
            f"subgraph for modality {modality} is disconnected; components: {self.components}"
        )


class InvalidGamma(ConfigError):
    pass


class InvalidSigma(ConfigError):
    pass


class InvalidFraction(ConfigError):
    pass


class ModalityAbsent(ConfigError):
    pass


class DimensionMismatch(SheafSimError, ValueError):
    pass


class EmptyBatch(SheafSimError, ValueError):
    pass


class LabelOutOfRange(SheafSimError, ValueError):
    pass


class NonConvergent(SheafSimError, RuntimeError):
    pass


class NonFinite(SheafSimError, FloatingPointError):
    """A parameter update produced NaN or inf."""
