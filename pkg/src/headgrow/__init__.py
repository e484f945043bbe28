"""Head reconstruction from pose-clustered photo collections.

Photometric stereo per view cluster, linear ambiguity resolution against a
reference shape, and boundary-value growing from the frontal view outward.
"""

from .ambiguity import AmbiguityTransform, apply_ambiguity, solve_linear_ambiguity
from .errors import HeadgrowError
from .fields import DepthMap, NormalField
from .geometry import Pose, Similarity2D, fit_similarity_2d
from .grow import GROW_ORDER, GrowConfig, GrowState, grow_cluster, reconstruct, reconstruct_frontal
from .ingest import ClusterSet, Photo, PhotoCluster, assign_cluster, load_collection
from .integrate import BoundaryConstraint, integrate_normals, make_blend_mask
from .mesh import HeadMesh, read_mesh, write_obj, write_ply
from .photometric import LightingBasis, photometric_stereo

__version__ = "0.1.0"

__all__ = [
    "AmbiguityTransform",
    "BoundaryConstraint",
    "ClusterSet",
    "DepthMap",
    "GROW_ORDER",
    "GrowConfig",
    "GrowState",
    "HeadMesh",
    "HeadgrowError",
    "LightingBasis",
    "NormalField",
    "Photo",
    "PhotoCluster",
    "Pose",
    "Similarity2D",
    "apply_ambiguity",
    "assign_cluster",
    "fit_similarity_2d",
    "grow_cluster",
    "integrate_normals",
    "load_collection",
    "make_blend_mask",
    "photometric_stereo",
    "read_mesh",
    "reconstruct",
    "reconstruct_frontal",
    "solve_linear_ambiguity",
    "write_obj",
    "write_ply",
]
