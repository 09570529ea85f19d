import pytest

from broadrefine.catalog import Catalog, Item, reference_benchmark, reference_catalog
from broadrefine.engine import SearchEngine
from broadrefine.querylang import parse


def make_item(id, category="blazer", attributes=None, price=100.0, tags=(), region="north",
              review_text="", ocr_text="", sales=10.0):
    return Item(
        id=id,
        title=f"{category} {id}",
        category=category,
        attributes=dict(attributes or {}),
        numeric={"price": price, "sales": sales},
        tags=frozenset(tags),
        region=region,
        review_text=review_text,
        ocr_text=ocr_text,
    )


@pytest.fixture(scope="session")
def ref_catalog():
    return reference_catalog()


@pytest.fixture(scope="session")
def ref_engine(ref_catalog):
    return SearchEngine(ref_catalog)


@pytest.fixture(scope="session")
def ref_bench():
    return reference_benchmark()


@pytest.fixture(scope="session")
def ref_queries(ref_bench):
    return [parse(r.query_text) for r in ref_bench]


@pytest.fixture
def tiny_catalog():
    items = [
        make_item(1, attributes={"material": "linen", "color": "black"}, price=600, tags={"beach-wedding"}),
        make_item(2, attributes={"material": "linen", "color": "white"}, price=700, tags={"summer"}),
        make_item(3, attributes={"material": "wool", "color": "white"}, price=900,
                  ocr_text="perfect for a beach-wedding"),
        make_item(4, category="dress", attributes={"material": "silk", "color": "red"}, price=300),
        make_item(5, attributes={"material": "linen", "color": "navy"}, price=550,
                  tags={"beach-wedding"}, region="nationwide"),
    ]
    return Catalog(items)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
