import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

from gridvlp.corpus import (
    DetectorAnnotation,
    ImageTextPair,
    ObjectProposal,
    SyntheticSceneSpec,
    corpus_meta_for_spec,
    generate_synthetic,
)
from gridvlp.encoder import build_vocab
from gridvlp.knowledge import hash_embedder
from gridvlp.model import PretrainModel, init_parameters
from gridvlp.pretext import prepare_pairs


@pytest.fixture(scope="session")
def scene_spec():
    return SyntheticSceneSpec()


@pytest.fixture(scope="session")
def small_corpus(scene_spec):
    pairs, annotations = generate_synthetic(scene_spec, 16, seed=0)
    return pairs, annotations, corpus_meta_for_spec(scene_spec)


@pytest.fixture(scope="session")
def small_setup(small_corpus):
    """Vocab, embedder, prepared pairs, and a small initialized model over the
    16-pair synthetic corpus."""
    pairs, annotations, meta = small_corpus
    vocab = build_vocab([p.caption for p in pairs])
    embedder = hash_embedder(32, seed=13)
    prepared = prepare_pairs(pairs, annotations, vocab, embedder, meta.lexicon)
    model = PretrainModel(
        vocab_size=len(vocab), k_cat=meta.k_cat, d_o=meta.d_o,
        d=32, n_layers=2, n_heads=4, d_ff=64, conv_channels=(8, 16, 32),
    )
    init_parameters(model, seed=7)
    model.eval()
    return {
        "pairs": pairs,
        "annotations": annotations,
        "meta": meta,
        "vocab": vocab,
        "embedder": embedder,
        "prepared": prepared,
        "model": model,
    }


def make_manual_pair(
    image_size=(48, 48),
    boxes=((2.0, 2.0, 14.0, 14.0), (18.0, 18.0, 30.0, 30.0), (34.0, 34.0, 46.0, 46.0)),
    names=("circle", "square", "triangle"),
    caption="a circle near a square .",
    k_cat=3,
    d_o=7,
    seed=0,
):
    """Hand-constructed pair/annotation for fixed-size tests."""
    rng = np.random.default_rng(seed)
    h, w = image_size
    pixels = rng.uniform(0.0, 1.0, size=(h, w, 3))
    proposals = []
    for i, (box, name) in enumerate(zip(boxes, names)):
        feat = np.zeros(d_o)
        feat[i % k_cat] = 1.0
        feat += rng.normal(0, 0.05, size=d_o)
        proposals.append(
            ObjectProposal(box=box, category_id=i % k_cat, category_name=name,
                           roi_feature=feat)
        )
    pair = ImageTextPair("img-manual", pixels, caption, "ann-manual")
    annotation = DetectorAnnotation("ann-manual", proposals)
    return pair, annotation
