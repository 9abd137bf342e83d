"""Limb-modular recurrent networks for uncertainty-torque prediction."""
from .data import (FeatureLayout, GroupDataset, build_dataset, feature_layout, features, split_indices,
                   targets, tick_features)
from .gru import SIGMA_MIN, gaussian_nll
from .optim import Adam, lr_at
from .train import (Normalizer, GroupNetwork, NetworkConfig, TrainConfig, TrainingError, load_networks, save_curves,
                    save_networks, train_all, train_group)
