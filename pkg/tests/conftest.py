import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from kgquery.toy import synthetic_splits  # noqa: E402


@pytest.fixture(scope="session")
def toy_splits():
    return synthetic_splits(seed=0)


@pytest.fixture(scope="session")
def tiny_graph():
    from kgquery.graph import load_triples

    return load_triples("a\tr\tb\na\tr\tc\nb\ts\td\nc\ts\td\nd\tr\ta\n")
