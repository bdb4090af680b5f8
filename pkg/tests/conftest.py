from pathlib import Path

import pytest

from skillrank.corpus import ingest_courses
from skillrank.dense import load_embeddings
from skillrank.encoder import EncoderConfig, Model, random_weights
from skillrank.metrics import load_qrels
from skillrank.ranker import Reranker
from skillrank.service import load_queries_tsv
from skillrank.tokenizer import WordTokenizer

DATA_DIR = Path(__file__).resolve().parents[1] / "data" / "mini"


@pytest.fixture(scope="session")
def mini_docs():
    return ingest_courses(DATA_DIR / "courses.jsonl")


@pytest.fixture(scope="session")
def mini_docs_by_id(mini_docs):
    return {d.id: d for d in mini_docs}


@pytest.fixture(scope="session")
def mini_qrels():
    return load_qrels(DATA_DIR / "qrels.txt")


@pytest.fixture(scope="session")
def mini_queries():
    return load_queries_tsv(DATA_DIR / "queries.tsv")


@pytest.fixture(scope="session")
def mini_doc_store():
    return load_embeddings(DATA_DIR / "doc_embeddings.txt")


@pytest.fixture(scope="session")
def mini_query_store():
    return load_embeddings(DATA_DIR / "query_embeddings.txt")


@pytest.fixture(scope="session")
def toy_config():
    return EncoderConfig(vocab_size=128, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_input_len=512)


@pytest.fixture(scope="session")
def toy_model(toy_config):
    return Model(toy_config, random_weights(toy_config, seed=3))


@pytest.fixture()
def toy_reranker(toy_config):
    # fresh model per test: train_toy mutates the head in place
    model = Model(toy_config, random_weights(toy_config, seed=3))
    return Reranker(model, WordTokenizer(toy_config.vocab_size))
