import matplotlib.pyplot as plt
import numpy as np
import pytest

from pps_vae import _image_tools
from pps_vae._json_report import JSONReport


def test_to_rgb():
    gray = np.full((1, 2, 3), 0.25)
    assert _image_tools.to_rgb(gray).shape == (2, 3, 3)
    assert _image_tools.to_rgb(np.full((3, 2, 2), 2.0)).max() == 1.0
    with pytest.raises(ValueError):
        _image_tools.to_rgb(np.zeros((2, 4, 4)))


def test_mask_panel_has_two_colours():
    mask = np.zeros((1, 4, 4))
    mask[0, 1, 2] = 1
    rgb = _image_tools.mask_to_rgb(mask)
    colours = {tuple(pixel) for pixel in rgb.reshape(-1, 3)}
    assert colours == {_image_tools.MASK_ON_COLOR, _image_tools.MASK_OFF_COLOR}
    assert tuple(rgb[1, 2]) == _image_tools.MASK_ON_COLOR


def test_compose_grid_layout():
    tiles = [np.zeros((4, 5, 3)) for _ in range(5)]
    canvas = _image_tools.compose_grid(tiles, columns=3, padding=2)
    assert canvas.shape == (2 * 4 + 3 * 2, 3 * 5 + 4 * 2, 3)
    assert tuple(canvas[0, 0]) == _image_tools.PAD_COLOR
    assert tuple(canvas[2, 2]) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        _image_tools.compose_grid([], columns=1)


def test_trace_panels():
    image = np.random.default_rng(0).uniform(size=(1, 3, 3))
    mask = np.zeros((1, 3, 3))
    mask[0, 0, 0] = 1
    panels = _image_tools.trace_panels(mask, image * mask, image * (1 - mask), image, scale=2)
    assert len(panels) == 4
    assert all(panel.shape == (6, 6, 3) for panel in panels)


def test_contrast_colour_and_circles():
    assert tuple(_image_tools.contrast_color(np.zeros((4, 4, 3)))) == (1.0, 1.0, 1.0)
    assert tuple(_image_tools.contrast_color(np.ones((4, 4, 3)))) == (0.0, 0.0, 0.0)
    canvas = np.zeros((16, 16, 3))
    _image_tools.draw_circle(canvas, (8, 8), 4, (1.0, 0.0, 0.0))
    assert tuple(canvas[8, 12]) == (1.0, 0.0, 0.0)
    assert tuple(canvas[8, 8]) == (0.0, 0.0, 0.0)


def test_reconstruction_figure():
    originals = np.zeros((2, 1, 4, 4))
    masks = np.zeros((2, 1, 4, 4))
    masks[0, 0, 1, 1] = 1
    masks[1, 0, 3, 0] = 1
    masks[1, 0, 2, 2] = 1
    canvas, centers = _image_tools.reconstruction_figure(originals, originals, masks, scale=8, padding=2)
    assert canvas.shape == (2 * 32 + 3 * 2, 2 * 32 + 3 * 2, 3)
    assert centers == [[[1, 1]], [[2, 2], [3, 0]]]


def test_save_png(tmp_path):
    path = str(tmp_path / 'figures' / 'grid.png')
    _image_tools.save_png(path, np.full((6, 10, 3), 0.5))
    assert plt.imread(path).shape[:2] == (6, 10)


def test_json_report(tmp_path):
    report = JSONReport()
    report.set_contents_at_path('probe/yM-sample/f1', 0.5)
    report.set_contents_at_path('/M/', 8)
    assert report.get_contents_at_path('probe/yM-sample') == {'f1': 0.5}
    assert report.get_contents_at_path('M') == 8
    with pytest.raises(KeyError):
        report.get_contents_at_path('probe/random-yM')
    with pytest.raises(KeyError):
        report.set_contents_at_path('imputation/win_rate', 0.7, create_if_nonexistent=False)
    path = str(tmp_path / 'out' / 'report.json')
    report.dump_to_file(path)
    assert JSONReport.read_from_file(path).json == report.json
    assert '"M": 8' in report.get_dump_string()
