import pytest
from loguru import logger

from sohkan.data_utils import prepare_splits
from sohkan.thermal_sim import CycleProfile, ResistanceSchedule, ThermalParams, simulate_life


SMALL_HORIZON = 30


@pytest.fixture
def thermal_params():
    return ThermalParams()


@pytest.fixture
def small_profile():
    # 60 rest + 120 CC samples per cycle; N=30 with training offsets up to 29 needs 60
    return CycleProfile(cc_duration=120.0, rest_duration=60.0, n_cycles=40)


@pytest.fixture
def small_life(thermal_params, small_profile):
    return simulate_life(thermal_params, small_profile, ResistanceSchedule())


@pytest.fixture
def small_dataset(small_life):
    return small_life[0]


@pytest.fixture
def small_oracle(small_life):
    return small_life[1]


@pytest.fixture
def small_splits(small_dataset):
    return prepare_splits(small_dataset, SMALL_HORIZON)


@pytest.fixture
def log_messages():
    """Messages logged through loguru while the test runs, as `LEVEL: message` strings."""
    messages = []
    sink_id = logger.add(lambda msg: messages.append(f"{msg.record['level'].name}: {msg.record['message']}"))
    yield messages
    logger.remove(sink_id)
