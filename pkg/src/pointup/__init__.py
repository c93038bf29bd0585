"""Self-supervised point cloud upsampling with a differentiable silhouette renderer."""

from .cloud import (Patch, augment, extract_patches, farthest_point_sampling, knn, knn_table,
                    normalize_unit_sphere)
from .errors import (DegenerateGeometryError, DivergedError, InvalidArgumentError, InvalidInputError,
                     ParseError, PointUpError, UnsupportedFaceError)
from .losses import (LossReport, LossWeights, emd, hausdorff_loss, image_consistent_loss, joint_loss,
                     joint_loss_gradient, shape_consistent_loss, uniform_loss)
from .metrics import MetricReport, ReferenceMesh, chamfer, evaluate, hausdorff_metric, p2f
from .neu import NeuParams, init_params, load_params, save_params, upsampler_forward, upsampler_gradient
from .optimize import OptimConfig, OptimTrace, adam_step, train_neu, upsample_direct
from .render import (Camera, CameraRig, RenderParams, SurfelSoup, build_tangent_triangles, make_view_ring,
                     rasterize_gradient, rasterize_silhouette, render_views)

__version__ = "0.1.0"
