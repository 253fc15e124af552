import pytest

from vickam.pipeline import TrainConfig, stage1_run
from vickam.synthgen import SynthConfig, gen_dataset


def small_synth(**kw):
    base = dict(K_g=4, K_a=3, h=16, w=20, C=3, p=3, noise_sigma=0.1, n_train=40, n_test=20, seed=7)
    base.update(kw)
    return SynthConfig(**base)


def small_train(**kw):
    base = dict(K_g=4, K_a=3, h=16, w=20, C=3, p=3, r=3, D=16, d=8,
                epochs_stage1=3, epochs_stage2=4, batch_size=4, seed=7)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_ds():
    return gen_dataset(small_synth())


@pytest.fixture(scope="session")
def small_knowledge(small_ds):
    bank, relmaps, params, metrics = stage1_run(small_ds.train, small_train(),
                                                action_names=["a0", "a1", "a2"])
    return bank, relmaps, params, metrics
