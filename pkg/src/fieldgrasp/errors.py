"""Exception types raised across the package."""


class FieldGraspError(Exception):
    """Base class for package errors."""

    #: short machine-readable tag used by the CLI error JSON
    code = "error"


class MeshFormatError(FieldGraspError, ValueError):
    code = "mesh_format"


class MeshIndexError(MeshFormatError, IndexError):
    code = "mesh_index"


class DegenerateElementError(MeshFormatError):
    code = "degenerate_element"


class PrimitiveError(FieldGraspError, ValueError):
    code = "unmeshable_primitive"


class ConvergenceError(FieldGraspError, RuntimeError):
    code = "no_convergence"


class IsolatedVertexError(FieldGraspError, ValueError):
    code = "isolated_vertex"


class GraspMissError(FieldGraspError, ValueError):
    code = "grasp_miss"


class NoContactError(FieldGraspError, ValueError):
    code = "no_contact"


class SamplerExhaustedError(FieldGraspError, RuntimeError):
    code = "sampler_exhausted"


class ShapeMismatchError(FieldGraspError, ValueError):
    code = "shape_mismatch"


class NonFiniteError(FieldGraspError, FloatingPointError):
    code = "non_finite"


class TapeError(FieldGraspError, KeyError):
    code = "tape"


class UndefinedRankError(FieldGraspError, ValueError):
    code = "undefined_rank"
