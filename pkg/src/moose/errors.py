"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Array shapes do not line up."""


class DegenerateParameterError(ContractError):
    """A parameter takes a value the parameterization cannot represent."""


class DivergenceError(RuntimeError):
    """Training or rollout produced non-finite numbers."""


class FormatError(ContractError):
    """A file does not match the expected on-disk format or version."""
