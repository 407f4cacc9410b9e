"""Exception types shared across the package."""


class MeshSpmdError(Exception):
    """Base class for every error raised by this library."""


class DuplicateDimName(MeshSpmdError):
    """A shape contains two dimensions with the same name."""


class DimSizeMismatch(MeshSpmdError):
    """The same dimension name is used with two different sizes."""


class BroadcastIncompatible(MeshSpmdError):
    """Neither component-wise operand's dimension set contains the other's."""


class ReshapeCountMismatch(MeshSpmdError):
    """Reshape input and output disagree on total element count."""


class UnknownOutputDim(MeshSpmdError):
    """An einsum output dimension does not occur in any input."""


class UnknownNode(MeshSpmdError):
    """A node id was referenced that does not exist in the graph."""


class MissingBinding(MeshSpmdError):
    """An input or variable node was not bound to a value."""


class ShapeMismatch(MeshSpmdError):
    """A bound value's shape does not match the node's declared shape."""


class CoordOutOfRange(MeshSpmdError):
    """A processor coordinate lies outside the mesh."""


class ReplicaDivergence(MeshSpmdError):
    """Slices that should be replicas of each other disagree."""


class ShapeMismatchAcrossGroup(MeshSpmdError):
    """Collective group members supplied values of different shapes."""


class IllegalLayout(MeshSpmdError):
    """A computation layout failed validation for a graph and mesh."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class UnsupportedReshape(MeshSpmdError):
    """A reshape's index remapping cannot be lowered with the supported
    gather / slice / exchange patterns plus local reindexing."""


class InternalShapeMismatch(MeshSpmdError):
    """An executed buffer's shape disagrees with the lowered program;
    indicates a lowering bug."""


class NonScalarLoss(MeshSpmdError):
    """Gradient construction requires a zero-dimensional loss node."""


class NonDifferentiableNode(MeshSpmdError):
    """A gradient was requested through an operation with no derivative rule."""


class ProgramFileError(MeshSpmdError):
    """A program file failed to parse; carries the offending field path."""

    def __init__(self, location, message):
        self.location = location
        super().__init__(f"{location}: {message}")
