"""pytest 共享夹具: 车种、规则库和构造车辆的工具"""

import pytest

from config import KINDS_FILE, RULES_FILE
from fuzzy_engine import load_rule_base
from lane_dynamics import DynamicsSettings
from random_streams import KeyedRNG
from vehicle_model import Direction, LaneConfiguration, VehicleState, load_kinds


@pytest.fixture(scope="session")
def kinds():
    return load_kinds(KINDS_FILE)


@pytest.fixture(scope="session")
def passenger(kinds):
    return kinds["passenger"]


@pytest.fixture(scope="session")
def long_kind(kinds):
    return kinds["long"]


@pytest.fixture(scope="session")
def rule_base():
    return load_rule_base(RULES_FILE)


@pytest.fixture
def quiet_settings(rule_base):
    """关闭加速度噪声的演化设置"""
    return DynamicsSettings(rule_base=rule_base, noise_enabled=False)


@pytest.fixture
def rng():
    return KeyedRNG(seed=7, repetition=0)


@pytest.fixture
def make_vehicle(passenger):
    def factory(x, v=0.0, s=0.0, d=Direction.NONE, vid=0, kind=None, d_prime=Direction.NONE):
        return VehicleState(kind=kind or passenger, x=float(x), v=float(v), s=float(s),
                            d=d, d_prime=d_prime, vid=vid)
    return factory


@pytest.fixture
def make_lane(make_vehicle):
    """按 (x, v) 列表构造一条车道，vid 依次编号"""
    def factory(specs, left_exists=False, right_exists=True, kind=None):
        cells = tuple(make_vehicle(x, v, vid=i, kind=kind) for i, (x, v) in enumerate(specs))
        return LaneConfiguration(cells, left_exists=left_exists, right_exists=right_exists)
    return factory
