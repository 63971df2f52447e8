class ConfigError(ValueError):
    """A configuration violates a documented invariant."""


class CacheError(ValueError):
    """A cache operation was called on a cache in the wrong state."""


class TriggerError(RuntimeError):
    """Compression was invoked outside its trigger window (caller bug)."""
