"""Active appearance model fitting with analytic (Gauss-Newton, gradient
descent) and learned-prior (generator + discriminator) objectives."""
from __future__ import annotations

from .data import AnnotatedImage, Dataset, load_image, read_manifest, read_pts, save_pts, split_dataset
from .exceptions import *  # noqa: F401,F403
from .fitting import (FitConfig, FitReport, composed_update, gradient_descent_fit, optimal_appearance,
                      project_out_fit, pyramid_fit, simultaneous_fit, ssd_cost)
from .gan_fitting import (GanFitConfig, GanPrior, composite_objective, gan_fit, reconstruction_fit,
                          recover_appearance, train_prior)
from .geometry import (ReferenceFrame, Triangulation, compose_shapes, delaunay_triangulate,
                       sample_to_reference, warp_image, warp_jacobian)
from .metrics import MetricsReport, convergence_flag, landmark_accuracy, mean_error, normalized_mse
from .models import (AAM, AppearanceModel, PointDistributionModel, build_aam, build_appearance_model,
                     build_pdm, render_instance)
from .nets import Discriminator, Generator, TrainConfig, train_gan

__version__ = "0.1.0"
