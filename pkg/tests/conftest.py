import pytest

from feddcg.encoder import TextEncoderStub
from feddcg.store import EmbeddingStore, generate_synthetic


@pytest.fixture
def toy_store() -> EmbeddingStore:
    return generate_synthetic(3, 10, 32, 32, 10, 0.8, 0.05, seed=7)


@pytest.fixture
def toy_stub(toy_store) -> TextEncoderStub:
    return TextEncoderStub.create(7, toy_store.token_dim, toy_store.dim)
