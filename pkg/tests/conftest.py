import numpy as np
import pytest

from decaylab.config import CorpusRef, PipelineConfig, StageConfig
from decaylab.data import corpus_from_bytes, synthetic_text
from decaylab.model import ModelConfig
from decaylab.schedule import ScheduleSpec


@pytest.fixture(scope="session")
def web_corpus():
    return corpus_from_bytes("web", synthetic_text(60_000, 1, "prose"), 0.9)


@pytest.fixture(scope="session")
def chat_corpus():
    return corpus_from_bytes("chat", synthetic_text(30_000, 2, "dialog"), 0.9)


@pytest.fixture(scope="session")
def corpora(web_corpus, chat_corpus):
    return {"web": web_corpus, "chat": chat_corpus}


@pytest.fixture
def tiny_model():
    # d = 256*3 + 12*6 + 6 + 6*256 + 256 = 2638
    return ModelConfig(context_window=4, embed_dim=3, hidden_dims=(6,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_pipeline(pre_steps=40, sft_steps=20, family="wsd", alpha_pre=0.1, sft_lr=1e-3,
                  seed=0, model=None, probes=(), eval_stride=10, **kw):
    model = model or ModelConfig(context_window=4, embed_dim=4, hidden_dims=(8,))
    stages = [StageConfig("pre", "web", ScheduleSpec(family, 3e-3, alpha_pre, 5, pre_steps, 0.75),
                          pre_steps, batch_size=16, probes=tuple(probes), eval_stride=eval_stride)]
    if sft_steps is not None:
        stages.append(StageConfig("sft", "chat", ScheduleSpec("sft-cosine", sft_lr, 0.0, min(100, sft_steps // 10),
                                                              max(sft_steps, 1)), sft_steps, batch_size=16,
                                  eval_stride=eval_stride))
        if sft_steps == 0:
            stages[-1] = StageConfig("sft", "chat", ScheduleSpec("sft-cosine", sft_lr, 0.0, 0, 1), 0,
                                     batch_size=16, eval_stride=eval_stride)
    return PipelineConfig(
        model=model,
        corpora={"web": CorpusRef("web.txt"), "chat": CorpusRef("chat.txt")},
        stages=tuple(stages),
        seed=seed,
        eval_batches=2,
        eval_batch_size=32,
        **kw,
    )
