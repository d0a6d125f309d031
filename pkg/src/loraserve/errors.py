"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand does not conform to the expected dimensions."""


class NumericError(ArithmeticError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class CacheStateError(RuntimeError):
    """KV cache does not match the layer it is used with."""


class AdapterLookupError(KeyError):
    pass


class ProtocolError(RuntimeError):
    """Shared-memory sequencing rule violated."""


class WorkerFault(RuntimeError):
    pass


class FitError(ValueError):
    """Profile data cannot determine a line."""


class RoutingError(LookupError):
    """No server can take the request right now (caller should retry)."""
