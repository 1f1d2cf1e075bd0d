import importlib.resources as res

import pytest

from opfproxy.grid import build_admittances, parse_case


def load_case(name):
    text = (res.files("opfproxy") / "cases" / f"{name}.m").read_text()
    return parse_case(text)


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case57():
    return load_case("case57")


@pytest.fixture(scope="session")
def adm9(case9):
    return build_admittances(case9)


@pytest.fixture(scope="session")
def adm14(case14):
    return build_admittances(case14)


@pytest.fixture(scope="session")
def adm57(case57):
    return build_admittances(case57)
