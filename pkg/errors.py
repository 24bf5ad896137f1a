class ConfigurationError(ValueError):
    """Unknown profile, attribute, config key, or a missing prerequisite artifact."""


class ShapeError(ValueError):
    """Tensor or embedding does not match the active profile."""


class ValidationError(ValueError):
    """Batch or input content violates an operation's precondition."""


class TokenizationError(ValueError):
    """Caption word outside the toy vocabulary."""


class AdapterStateError(RuntimeError):
    """Attach on an attached denoiser or detach on a detached one."""


class GenerationError(RuntimeError):
    """Toy world could not produce a valid sample."""
