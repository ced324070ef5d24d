import pytest

from blasoff.costmodel import builtin_profiles
from blasoff.model import make_call

# reference workload used for calibration: dgemm 'T','N', double
REF_DIMS = (32, 2400, 93536)
REF_FLOPS = 14_367_129_600
REF_A_BYTES = 23_945_216
REF_B_BYTES = 1_795_891_200
REF_C_BYTES = 614_400
REF_COPY_BYTES = 1_821_065_216  # A + B + 2*C
REF_TOUCH_BYTES = 1_820_450_816  # A + B + C, page-exact at 4096

SCILIB_VARS = (
    "SCILIB_STRATEGY",
    "SCILIB_THRESHOLD",
    "SCILIB_ROUTINES",
    "SCILIB_DEBUG",
    "SCILIB_PAGE_SIZE",
    "SCILIB_DEVICE_CAPACITY",
    "SCILIB_TRACE",
    "SCILIB_STATS",
)


def reference_call(seq=1):
    return make_call(
        seq,
        "dgemm",
        "T",
        "N",
        *REF_DIMS,
        addr_a=0x1_0000_0000,
        addr_b=0x2_0000_0000,
        addr_c=0x3_0000_0000,
    )


@pytest.fixture
def ref_call():
    return reference_call()


@pytest.fixture
def gh200():
    return builtin_profiles()["gh200"]


@pytest.fixture
def h100():
    return builtin_profiles()["h100_pcie"]


@pytest.fixture
def clean_env(monkeypatch):
    """Strip SCILIB_* variables so config comes out at defaults."""
    for var in SCILIB_VARS:
        monkeypatch.delenv(var, raising=False)
    return monkeypatch
