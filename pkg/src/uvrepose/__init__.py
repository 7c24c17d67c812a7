"""UV-space human reposing at desk scale: inverse rasterization, donor masking,
conditional flow matching, few-shot personalization and identity clustering."""

from .errors import ConfigError, InputError, NumericError, ProjectionError, UVReposeError

__version__ = "0.1.0"
