"""Gated low-rank inheritance of trained networks.

Compress a trained teacher into a lightweight gated low-rank network by
truncated-SVD initialization, fine-tune it (optionally with distillation),
and verify the compression, fidelity, and convergence properties
numerically at desk scale.
"""

from .errors import (CorruptionError, DegenerateInputError, FormatError,
                     NumericalError, ParseError, RangeError, ShapeError,
                     StateError)
from .linalg import (SvdFactorization, condition_number, frobenius_norm,
                     matmul, softmax, truncated_svd)
from .nn import (Conv2DLayer, DenseLayer, Network, ReluLayer, cross_entropy,
                 finite_difference_grad, make_mlp, mse_loss)
from .inherit import (InherConv2DLayer, InherNetLayer, InverseLayer,
                      SymmetricLayer, build_inverse, gradient_decomposition_check,
                      inherit_conv, inherit_dense, inherit_network, make_variant)
from .train import (GatingVarianceReport, RunLog, TrainConfig,
                    gating_grad_variance, kd_loss, learning_rate, sgd_step, train)
from .theory import (HeadGainsReport, LayerInfluence, TheoryReport,
                     analyze_network, compression_ratio_paper,
                     eckart_young_error, head_marginal_gains,
                     output_cosine_similarity, param_count_actual,
                     preservation_bound, rank_for_energy, spectral_energy)
from .io import (Dataset, SyntheticTask, gen_synthetic, load_checkpoint,
                 load_csv, save_checkpoint, save_dataset_csv)

__version__ = "0.1.0"
