"""SSN trajectory prediction: a hybrid CNN/LSTM/attention backbone built on
its own autograd kernel, trained on synthetic BEV driving scenes and evaluated
closed-loop with a front/side/rear collision taxonomy."""

from .errors import (DimensionError, FormatError, IndexRangeError, InsufficientFutureError,
                     SsnError, TruncationError, UsageError, ValidationError)
from .geometry import Obb, compose_pose, obb_overlap, relative_pose, wrap_angle
from .layers import LinearLayer, LstmParams, MhsaParams, linear_forward, lstm_last_output, lstm_step, mhsa
from .network import (NetworkConfig, NetworkGraph, ParamStore, TrajectoryPrediction, build_network,
                      c_block, fmhsa, iru, network_forward, rru, split_subgraphs, ssn_block, stem, ucd)
from .scenes import (Agent, Dataset, Frame, RasterConfig, Scene, WorldConfig, ego_targets,
                     generate_synthetic_scenes, rasterize, read_dataset, write_dataset)
from .tensor import Tensor, no_grad
from .training import (Checkpoint, TrainConfig, checkpoint_to_network, fit, load_checkpoint,
                       optimizer_step, save_checkpoint, trajectory_loss)
from .evaluation import (CollisionEvent, CollisionReport, classify_collision, evaluate,
                         unroll_closed_loop)

__version__ = "0.1.0"
