import pytest

from fedchain.crypto import Entropy, SigningKeyPair, SymmetricKey
from fedchain.enclave import MEASUREMENT, EnclaveIdentity
from fedchain.params import ModelSpec

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion for the summary."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title}  {detail}")


@pytest.fixture
def logistic_spec():
    return ModelSpec("logistic", (2, 2))


@pytest.fixture
def mlp_spec():
    return ModelSpec("mlp", (4, 3, 2))


@pytest.fixture
def entropy():
    return Entropy(1234, "tests")


@pytest.fixture
def identity():
    return EnclaveIdentity(MEASUREMENT, 1, 0)


@pytest.fixture
def att_key(entropy):
    return SigningKeyPair.generate("enclave-0", entropy.child("att"))


def make_keys(entropy, clusters, node=0):
    return {c: SymmetricKey(entropy.child(f"k{c}").take(32), (c << 16) | node)
            for c in range(clusters)}
