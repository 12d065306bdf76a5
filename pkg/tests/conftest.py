import pytest

from hostcap import case33


@pytest.fixture(scope="session")
def ieee33():
    return case33.ieee33()


@pytest.fixture(scope="session")
def ieee33_network(ieee33):
    return ieee33.network


@pytest.fixture(scope="session")
def ieee33_scenario(ieee33):
    return ieee33.scenario


@pytest.fixture(scope="session")
def instance_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("instances") / "ieee33.json"
    case33.write_instance(path)
    return path
