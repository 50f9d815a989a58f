class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class TrainingDivergedError(ArithmeticError):
    """Raised when a loss becomes non-finite during optimisation."""

    def __init__(self, epoch: int, where: str = "training"):
        super().__init__(f"{where} diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch
