import numpy as np
import pytest

from fdamerge.netmodel import ACT_TANH, AffineBlock, Checkpoint, FfnBlock
from fdamerge.numkit import RngStream


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def small_affine_pair(rng, d=6, q=5, delta_scale=0.3):
    w0 = rng.normal(0, 0.4, (q, d))
    b0 = rng.normal(0, 0.1, q)
    wi = w0 + delta_scale * rng.normal(0, 1.0, (q, d))
    bi = b0 + delta_scale * rng.normal(0, 0.3, q)
    return AffineBlock(w0, b0), AffineBlock(wi, bi)


def small_ffn_pair(rng, d=4, h=6, q=4, delta_scale=0.3):
    w1 = rng.normal(0, 0.4, (h, d))
    b1 = rng.normal(0, 0.1, h)
    w2 = rng.normal(0, 0.4, (q, h))
    b2 = rng.normal(0, 0.1, q)
    blk0 = FfnBlock(w1, b1, ACT_TANH, w2, b2)
    blki = FfnBlock(w1 + delta_scale * rng.normal(0, 1.0, (h, d)),
                    b1 + delta_scale * rng.normal(0, 0.3, h), ACT_TANH,
                    w2 + delta_scale * rng.normal(0, 1.0, (q, h)),
                    b2 + delta_scale * rng.normal(0, 0.3, q))
    return blk0, blki


def two_block_checkpoint_pair(seed=7, delta_scale=0.1):
    """Affine(16->32)+tanh then residual FFN(32->64->32), plus a finetuned twin."""
    rng = np.random.default_rng(seed)
    a0 = AffineBlock(rng.normal(0, 0.3, (32, 16)), rng.normal(0, 0.1, 32), ACT_TANH)
    f0 = FfnBlock(rng.normal(0, 0.3, (64, 32)), rng.normal(0, 0.1, 64), ACT_TANH,
                  rng.normal(0, 0.3, (32, 64)), rng.normal(0, 0.1, 32))
    theta0 = Checkpoint([a0, f0], name="theta0")
    ai = AffineBlock(a0.w + delta_scale * rng.normal(size=(32, 16)),
                     a0.b + delta_scale * rng.normal(size=32), ACT_TANH)
    fi = FfnBlock(f0.w1 + delta_scale * rng.normal(size=(64, 32)),
                  f0.b1 + delta_scale * rng.normal(size=64), ACT_TANH,
                  f0.w2 + delta_scale * rng.normal(size=(32, 64)),
                  f0.b2 + delta_scale * rng.normal(size=32))
    theta1 = Checkpoint([ai, fi], name="theta1")
    return theta0, theta1


@pytest.fixture
def checkpoint_pair():
    return two_block_checkpoint_pair()


@pytest.fixture
def stream():
    return RngStream(2024)
