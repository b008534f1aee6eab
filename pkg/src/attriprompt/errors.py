"""Exception types shared across the package."""


class AttriPromptError(Exception):
    pass


class DimensionError(AttriPromptError, ValueError):
    pass


class DegenerateInputError(AttriPromptError, ValueError):
    pass


class ContractError(AttriPromptError, ValueError):
    pass


class ReplayError(AttriPromptError, RuntimeError):
    pass


class DeterminismError(AttriPromptError, RuntimeError):
    pass


class ConfigError(AttriPromptError, ValueError):
    pass


class GenerationError(AttriPromptError, ValueError):
    pass


class FormatError(AttriPromptError, ValueError):
    pass
