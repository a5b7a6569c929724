"""
Exception Hierarchy
===================

Every failure raised by the package derives from CGCVError so the CLI can
report it with a one-line diagnostic.
"""

from typing import Optional


class CGCVError(Exception):
    """Base class for all package errors"""


class DimensionError(CGCVError, ValueError):
    """Tensor shapes or dimensions are inconsistent"""


class ContractViolation(CGCVError, RuntimeError):
    """A caller broke an operation precondition"""


class ConfigurationError(CGCVError, ValueError):
    """Configuration values or config files are invalid"""


class SpecError(CGCVError, ValueError):
    """A synthetic data spec cannot be realized"""


class EvaluationError(CGCVError, ArithmeticError):
    """A loss or gradient evaluation produced non-finite values"""


class FormatError(CGCVError, ValueError):
    """A file does not conform to its binary format"""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        location = ""
        if path is not None:
            location = f"{path}"
            if offset is not None:
                location += f" @ byte {offset}"
            location += ": "
        super().__init__(f"{location}{message}")
