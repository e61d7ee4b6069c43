import numpy as np
import pytest

from gradcheck import CHECKS
from helpers import rand_backbone, rand_dense
from odphar.nn import Model
from odphar.train import batch_loss_and_grads, trainable_arrays
from oracles import central_diff, rel_err


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("layer", sorted(CHECKS))
def test_layer_gradients(layer, seed):
    assert CHECKS[layer](seed) < 1e-3


def test_whole_network_gradient():
    rng = np.random.default_rng(0)
    bb = rand_backbone(rng, 2, 8, stem=3, blocks=(3, 4, 4), dtype=np.float64)
    model = Model(bb, rand_dense(rng, bb.flatten_dim, 3, dtype=np.float64, scale=0.3))
    x = rng.standard_normal((4, 2, 8))
    y = np.array([0, 1, 2, 1])

    def loss():
        return batch_loss_and_grads(model, x, y, rng, update_running=False)[0]

    _, grads = batch_loss_and_grads(model, x, y, rng, update_running=False)
    for name, arr in trainable_arrays(model).items():
        assert rel_err(grads[name], central_diff(loss, arr)) < 1e-3, name
