import numpy as np
import pytest

from collapse_lab.losses import LossSpec
from collapse_lab.ufm import Hyper

CONTRASTIVE = ("CE", "FL", "LS")
ALL_KINDS = ("CE", "FL", "LS", "MSE")

REFERENCE = dict(K=4, d=16, n=10, lambda_w=0.01, lambda_h=1e-5, lambda_b=0.01)


def reference_hyper(kind="CE"):
    return Hyper(**REFERENCE, loss=LossSpec(kind))


def small_hyper(kind="CE", K=3, d=5, n=2):
    return Hyper(K=K, d=d, n=n, lambda_w=0.02, lambda_h=0.003, lambda_b=0.01, loss=LossSpec(kind))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
