import os

# single-threaded BLAS before numpy loads anywhere; threaded GEMM breaks
# bit-reproducibility of the reports and oversubscribes the CI box
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest

from latefuse import textlm
from latefuse.config import RunConfig
from latefuse.pipeline import build_pipeline


@pytest.fixture(scope="session")
def stack():
    """Full default build at seed 0: world, LM, dual encoder, late fusion.

    Everything downstream (unit checks and the acceptance run) shares this
    one build; stage wall times stay on the artifact for the time budget
    assertion.
    """
    cfg = RunConfig(record_timing=False)
    return build_pipeline(cfg, placements=("late",), progress=True)


TINY_SENTENCES = [
    "the lamp is red .",
    "the door is blue .",
    "the cup is green .",
    "the book is yellow .",
]


@pytest.fixture(scope="session")
def tiny_sentences():
    return list(TINY_SENTENCES)


@pytest.fixture(scope="session")
def tiny_lm():
    """Small LM that memorizes four sentences; enough for scoring/sampling
    semantics without the full build."""
    vocab = textlm.build_vocabulary(TINY_SENTENCES)
    cfg = textlm.LmConfig(n_layers=2, n_heads=2, d_model=32, d_mlp=64, context=16)
    tcfg = textlm.LmTrainConfig(steps=350, batch_size=4, heldout_fraction=0.0)
    seqs = [textlm.tokenize(s, vocab) for s in TINY_SENTENCES]
    return textlm.train_lm(seqs, vocab, cfg, tcfg, seed=7)
