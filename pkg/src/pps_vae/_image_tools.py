"""
Figure composition on plain numpy RGB buffers, written to PNG with matplotlib. All canvases are H x W x 3 floats
in [0, 1].
"""
import logging
import os

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)

MASK_ON_COLOR = (0.993, 0.906, 0.144)
MASK_OFF_COLOR = (0.267, 0.005, 0.329)
PAD_COLOR = (1.0, 1.0, 1.0)
CIRCLE_COLORS = np.array([
    (1.0, 0.85, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.0, 1.0),
    (0.0, 0.0, 0.0),
    (1.0, 1.0, 1.0),
])


def to_rgb(image: np.ndarray) -> np.ndarray:
    """
    Converts a C x H x W image with 1 or 3 channels to H x W x 3, clamped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f'Expected a 1 or 3 channel C x H x W image, got shape {image.shape}')
    rgb = np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image
    return np.clip(rgb.transpose(1, 2, 0), 0.0, 1.0)


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    """
    Renders a binary H x W (or 1 x H x W) mask in exactly two colours.
    """
    mask = np.asarray(mask).reshape(np.asarray(mask).shape[-2:]) > 0.5
    return np.where(mask[..., None], np.array(MASK_ON_COLOR), np.array(MASK_OFF_COLOR))


def upscale(rgb: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(rgb, factor, axis=0), factor, axis=1)


def compose_grid(tiles: list, columns: int, padding: int = 2) -> np.ndarray:
    """
    Lays equally sized tiles out row by row with `padding` pixels of background around and between them.
    """
    if not tiles:
        raise ValueError('Nothing to compose')
    tile_h, tile_w = tiles[0].shape[:2]
    rows = -(-len(tiles) // columns)
    canvas = np.empty((rows * tile_h + (rows + 1) * padding, columns * tile_w + (columns + 1) * padding, 3))
    canvas[:] = PAD_COLOR
    for index, tile in enumerate(tiles):
        r, c = divmod(index, columns)
        top, left = padding + r * (tile_h + padding), padding + c * (tile_w + padding)
        canvas[top:top + tile_h, left:left + tile_w] = tile
    return canvas


def contrast_color(patch: np.ndarray) -> np.ndarray:
    """
    The palette colour furthest from the mean colour of a background patch.
    """
    background = patch.reshape(-1, 3).mean(axis=0)
    return CIRCLE_COLORS[np.argmax(np.linalg.norm(CIRCLE_COLORS - background, axis=1))]


def draw_circle(canvas: np.ndarray, center: tuple, radius: float, color, thickness: float = 1.0):
    """
    Draws a circle outline in place.
    """
    rows, cols = np.ogrid[:canvas.shape[0], :canvas.shape[1]]
    distance = np.sqrt((rows - center[0]) ** 2 + (cols - center[1]) ** 2)
    canvas[np.abs(distance - radius) <= thickness / 2] = color


def trace_panels(mask, context_values, target_values, image, scale: int = 8) -> list:
    """
    The four panels of a generation trace: the location mask, y_M, y_T and the final image.
    """
    return [upscale(mask_to_rgb(mask), scale)] + [upscale(to_rgb(values), scale)
                                                  for values in (context_values, target_values, image)]


def reconstruction_figure(originals: np.ndarray, reconstructions: np.ndarray, masks: np.ndarray, scale: int = 8,
                          padding: int = 2):
    """
    Two-row figure: originals with a contrast-coloured circle on every context location (top) and the
    reconstructions (bottom).
    :param originals: N x C x H x W
    :param reconstructions: N x C x H x W
    :param masks: N x 1 x H x W binary context masks
    :return: The canvas, and per image the list of (row, col) circle centres in pixel coordinates
    """
    top_tiles, centers = [], []
    radius = 0.4 * scale
    for original, mask in zip(originals, masks):
        tile = upscale(to_rgb(original), scale)
        points = np.argwhere(np.asarray(mask).reshape(mask.shape[-2:]) > 0.5)
        for row, col in points:
            center = ((row + 0.5) * scale - 0.5, (col + 0.5) * scale - 0.5)
            patch = tile[row * scale:(row + 1) * scale, col * scale:(col + 1) * scale]
            draw_circle(tile, center, radius, contrast_color(patch))
        top_tiles.append(tile)
        centers.append(points.tolist())
    bottom_tiles = [upscale(to_rgb(image), scale) for image in reconstructions]
    return compose_grid(top_tiles + bottom_tiles, columns=len(top_tiles), padding=padding), centers


def save_png(path: str, canvas: np.ndarray):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    plt.imsave(path, np.clip(canvas, 0.0, 1.0))
    logger.debug('Wrote %s', path)
