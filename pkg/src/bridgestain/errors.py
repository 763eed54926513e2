class InvalidInputError(ValueError):
    """An image or array does not satisfy an operation's preconditions."""


class InvalidConfigError(ValueError):
    pass


class InvalidStepError(ValueError):
    """A reverse-process step index outside the operation's valid range."""


class IncompatibleCheckpointError(ValueError):
    pass
