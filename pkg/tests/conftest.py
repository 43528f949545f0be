import datetime as dt
import sys

import pytest
from hypothesis import settings

from ehrfuse.ontology import Concept, MatchCode, OntologyCatalog, PhenotypeDefinition

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_catalog():
    return OntologyCatalog(
        [
            Concept("ICD10", "E11", "Type 2 diabetes mellitus"),
            Concept("ICD10", "E11.9", "Type 2 diabetes mellitus without complications"),
            Concept("ICD10", "I50", "Heart failure"),
            Concept("ICD10", "I50.0", "Congestive heart failure"),
            Concept("ICD10", "J45", "Asthma"),
            Concept("READ2", "C10F.", "Type 2 diabetes mellitus"),
            Concept("READ2", "C10F1", "Type 2 diabetes mellitus with renal complications"),
            Concept("READ2", "G58..", "Heart failure"),
            Concept("READ2", "H33..", "Asthma"),
            Concept("READ2", "1371.", "Never smoked tobacco"),
        ]
    )


@pytest.fixture(scope="session")
def small_defs():
    return [
        PhenotypeDefinition(
            "t2dm", "Type 2 diabetes",
            (MatchCode("ICD10", "E11", True), MatchCode("READ2", "C10F.", False)),
        ),
        PhenotypeDefinition(
            "hf", "Heart failure",
            (MatchCode("ICD10", "I50", True), MatchCode("READ2", "G58..", False)),
        ),
    ]


def day(n: int) -> dt.date:
    return dt.date(2010, 1, 1) + dt.timedelta(days=n)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
