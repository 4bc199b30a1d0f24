import numpy as np

from nfimaging import plotting

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _panels():
    edges = np.arange(0, 50, 5.0)
    x = np.linspace(0, 45, 50)
    return [
        plotting.Panel("a", "counts", "runs", edges, np.arange(9), {"model": (x, x / 5)}),
        plotting.Panel("b", "f", "power", curves={"p": (x, np.exp(-x))}, logy=True, vlines=(10.0,)),
        plotting.Panel("c", "x", "y"),
    ]


def test_render_writes_png(tmp_path):
    p = tmp_path / "fig.png"
    plotting.render_panels(p, _panels())
    assert p.read_bytes().startswith(PNG_MAGIC)


def test_render_is_byte_identical(tmp_path):
    plotting.render_panels(tmp_path / "a.png", _panels())
    plotting.render_panels(tmp_path / "b.png", _panels())
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
