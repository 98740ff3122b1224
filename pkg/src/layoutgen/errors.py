"""Exception types shared across the package."""


class LayoutGenError(Exception):
    """Base class for every error raised by this package."""


class ParseError(LayoutGenError):
    """Input text is not well-formed (JSON syntax, binary framing)."""


class ValidationError(LayoutGenError):
    """Input is well-formed but violates a domain invariant."""


class CapacityError(LayoutGenError):
    """More elements than available query slots."""


class EmptyConstraintError(LayoutGenError):
    """Partial layout has no constrained slot."""


class EmptyLayoutError(LayoutGenError):
    """Operation requires a layout with at least one element."""


class EmptySetError(LayoutGenError):
    """Operation requires a non-empty collection."""


class ShapeError(LayoutGenError):
    """Array arguments have incompatible shapes."""


class NonFiniteError(LayoutGenError):
    """A computed value is NaN or infinite."""


class NonScalarRootError(LayoutGenError):
    """Backward pass started from a non-scalar node."""


class TapeReusedError(LayoutGenError):
    """Backward pass invoked twice on the same tape."""


class UnspecifiedAttributeError(LayoutGenError):
    """Operation needs a concrete attribute constraint, not 'unspecified'."""


class GridTooSmallError(LayoutGenError):
    """Grid is too small for the requested stencil."""


class FormatError(LayoutGenError):
    """File content does not match the expected format."""
