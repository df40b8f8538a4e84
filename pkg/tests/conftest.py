import pytest

from adafuse.tensor import active_tape


@pytest.fixture(autouse=True)
def clear_tape():
    """Each test starts and ends with an empty op tape."""
    active_tape().clear()
    yield
    active_tape().clear()
