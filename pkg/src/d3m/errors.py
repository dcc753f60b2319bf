"""Exception hierarchy shared by every stage of the solver."""


class D3MError(Exception):
    pass


class InvalidArgumentError(D3MError, ValueError):
    pass


class ParseError(D3MError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SingularDomainError(D3MError):
    """Raised when the interior block of a domain has no admissible pivot."""

    def __init__(self, domain_id, pivot):
        self.domain_id = domain_id
        self.pivot = pivot
        super().__init__(f"singular interior matrix in domain {domain_id} at pivot {pivot}")


class FactorizationError(D3MError):
    def __init__(self, block, pivot, message=None):
        self.block = block
        self.pivot = pivot
        super().__init__(message or f"singular diagonal block {block} at pivot {pivot}")


class AssemblyError(D3MError):
    pass


class GraphError(D3MError):
    def __init__(self, message, cycle=None):
        self.cycle = cycle
        super().__init__(message)


class NotCalibratedError(D3MError):
    pass


class SchedulingError(D3MError):
    pass
