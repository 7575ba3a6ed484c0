"""memlab: a desk-scale laboratory for random-label memorization experiments.

Generates Gaussian-mixture toy data, trains small encoder/projector models on
randomized labels under various augmentation families, probes the learned
features with K-NN, and verifies the exact decomposition identities of the
augmented MSE loss.
"""

from .backend import active_backend
from .synthdata import (AugmentationSpec, LabeledDataset, ToyDataConfig,
                        generate_toy_data, iid_augment,
                        materialize_augmentations, mixup_pair,
                        randomize_labels, subspace_augment)
from .models import (InverseDistanceProjector, LayerActivations, LinearEncoder,
                     MlpNetwork, Model, grad_check, idp_forward, init_model,
                     linear_forward, mlp_forward)
from .training import (AdamState, DecompositionReport, OptimizerConfig,
                       TrainBudget, TrainHistory, adam_step, bias_limit_check,
                       loss_decompose, mean_deviation_identity, mse_loss,
                       train_run)
from .probing import (InvarianceEstimate, MemorizationVerdict, ProbeResult,
                      classify_memorization, knn_predict, knn_probe,
                      normalized_invariance, probe_layers)

__version__ = "0.1.0"
