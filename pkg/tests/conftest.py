import numpy as np
import pytest

from aerial_inspector.planner import PlannerParams, plan_mission
from aerial_inspector.structures import TurbineSpec, generate_turbine

# tower axis at the centroid of the anchor ring, as deployed in the field
SITE_XY = (13.36, 4.26)
SITE_SPEC = TurbineSpec(base_xy=SITE_XY)
TOWER_PARAMS = PlannerParams(n_agents=2, omega=7.0, v_d=1.0, z_start=8.0, z_end=24.0, alpha=90.0, beta=1.75)
BLADE_SPEC = TurbineSpec(rotor_azimuth_angles=(30.0, 150.0, 270.0), base_xy=SITE_XY)
BLADE_PARAMS = PlannerParams(n_agents=1, omega=9.0, v_d=1.2, z_start=30.0, z_end=45.0, alpha=90.0, beta=1.75,
                             cluster_epsilon=3.0)


@pytest.fixture(scope="session")
def turbine():
    return generate_turbine(TurbineSpec())


@pytest.fixture(scope="session")
def blade_turbine():
    return generate_turbine(BLADE_SPEC)


@pytest.fixture(scope="session")
def site_turbine():
    return generate_turbine(SITE_SPEC)


@pytest.fixture(scope="session")
def site_tower_plan(site_turbine):
    cloud, solid = site_turbine
    return plan_mission(cloud, solid, TOWER_PARAMS)


@pytest.fixture(scope="session")
def tower_plan(turbine):
    cloud, solid = turbine
    return plan_mission(cloud, solid, TOWER_PARAMS)


@pytest.fixture(scope="session")
def blade_plan(blade_turbine):
    cloud, solid = blade_turbine
    return plan_mission(cloud, solid, BLADE_PARAMS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
