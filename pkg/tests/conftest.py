import numpy as np
import pytest

from promerge import nn
from promerge.checkpoint import ModelWeights, task_vector
from promerge.nn import Linear
from promerge.tensor import Tensor


def perturbed_weights(theta_0: ModelWeights, scale: float, seed: int) -> ModelWeights:
    """A fine-tuned-style weight set: base plus modest Gaussian deltas."""
    rng = np.random.default_rng(seed)
    entries = {
        key: Tensor(t.array + scale * rng.standard_normal(t.shape))
        for key, t in theta_0.entries.items()
    }
    return ModelWeights(entries, theta_0.arch_fingerprint)


@pytest.fixture
def linear_pair():
    """Depth-2 linear model with a base and one fine-tuned expert."""
    layers = [Linear("l1", 4, 5), Linear("l2", 5, 3)]
    theta_0 = nn.init_weights(layers, seed=1)
    theta_1 = perturbed_weights(theta_0, 0.1, seed=2)
    return layers, theta_0, theta_1


def make_expert_setup(layers, num_tasks, seed, scale=0.1):
    theta_0 = nn.init_weights(layers, seed=seed)
    experts = [perturbed_weights(theta_0, scale, seed=seed + 10 + i) for i in range(num_tasks)]
    taus = [task_vector(experts[i], theta_0, source_task=f"t{i}") for i in range(num_tasks)]
    return theta_0, experts, taus
