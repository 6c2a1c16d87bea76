import pytest

# the figure package is optional; without it these tests skip rather
# than break collection of the main suite
pytest.importorskip("traceplot")
