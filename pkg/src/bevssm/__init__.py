"""bevssm: state-space sequence kernels over BEV grids, with a toy detection stack.

The package is organized as a small library:

* :mod:`bevssm.autodiff`, :mod:`bevssm.ops`, :mod:`bevssm.layers` - tape-based
  reverse-mode differentiation and the primitive set everything else uses;
* :mod:`bevssm.ssd` - three equivalent selective-scan routes and the gated
  sequence-mixing block;
* :mod:`bevssm.bevseq` - grid geometry, four-direction serialization, ego
  alignment;
* :mod:`bevssm.fusion` - temporal fusion of current and aligned historical
  grids (plus baselines);
* :mod:`bevssm.head` - query-based detection head, matching and losses;
* :mod:`bevssm.scene`, :mod:`bevssm.metrics`, :mod:`bevssm.training`,
  :mod:`bevssm.benchmark` - synthetic scenes, detection metrics, the training
  loop and timing/ablation harnesses;
* :mod:`bevssm.tensorio`, :mod:`bevssm.config`, :mod:`bevssm.cli` - container
  formats, configuration and the command-line front end.
"""

from .autodiff import Parameter, Tape, Tensor, finite_diff_check
from .errors import (BevssmError, CapacityError, ConfigError, DimensionError,
                     FormatError, GraphError, NumericError)
from . import ops
from .ssd import (Mamba2Block, Mamba2Config, SsmParams, quadratic_dual,
                  run_scan, scan_chunked, scan_linear)
from .bevseq import BevGrid, EgoPose, ego_align, rearrange, remerge
from .fusion import FusionConfig, TemporalMamba, build_fusion
from .head import (Box, DetectionHead, DetectionSet, HeadConfig,
                   detection_loss, hungarian_match)
from .scene import SceneConfig, gen_dataset, gen_scene
from .metrics import MetricsReport, ap_by_distance, evaluate, nds, tp_errors
from .training import (AdamW, DetectorModel, TrainConfig, evaluate_model, fit,
                       load_state, predict, state_dict)
from .benchmark import bench_scan, heatmap, run_ablation

__version__ = "0.1.0"
