"""Shipped benchmark geometries (dimensions in micrometers unless noted)."""

from __future__ import annotations

from .mesh import CrossSection2D, ExtrudedMesh, extrude

UM = 1e-6


def _mirror4(rect):
    x0, y0, x1, y1 = rect
    out = [(x0, y0, x1, y1), (-x1, y0, -x0, y1), (x0, -y1, x1, -y0), (-x1, -y1, -x0, -y0)]
    return list(dict.fromkeys(out))


def _mirror_x(rect):
    x0, y0, x1, y1 = rect
    return list(dict.fromkeys([(x0, y0, x1, y1), (-x1, y0, -x0, y1)]))


def clamped_beam_section(length=100.0, width=2.0, anchor=2.0) -> CrossSection2D:
    """Straight beam between two anchor blocks, centered on the origin."""
    h = length / 2
    rects = [(-h - anchor, -width / 2, -h, width / 2), (-h, -width / 2, h, width / 2), (h, -width / 2, h + anchor, width / 2)]
    return CrossSection2D.from_rectangles([tuple(v * UM for v in r) for r in rects], ["anchor", "spring", "anchor"])


def clamped_beam(length=100.0, width=2.0, thickness=2.0, edge=0.5, layers=4) -> ExtrudedMesh:
    """Clamped-clamped beam; anchors fully fixed."""
    return extrude(clamped_beam_section(length, width), thickness * UM, layers, edge * UM, fix="all")


def resonator_section(
    mass=(10.0, 6.0),
    beam_y=(4.0, 6.0),
    beam_x=(10.0, 40.0),
    anchor=(40.0, 44.0, 3.0, 7.0),
    finger=(10.0, 16.0, 1.5),
) -> CrossSection2D:
    """Quarter-symmetric proof mass on four straight beams.

    ``mass`` gives the half-extents of the proof mass, ``beam_y``/``beam_x``
    the y- and x-span of the upper right beam, ``anchor`` its anchor block and
    ``finger`` an electrode finger (x0, x1, half-height) on the mass side.
    """
    rects, tags = [(-mass[0], -mass[1], mass[0], mass[1])], ["mass"]
    for r in _mirror4((beam_x[0], beam_y[0], beam_x[1], beam_y[1])):
        rects.append(r)
        tags.append("spring")
    for r in _mirror4((anchor[0], anchor[2], anchor[1], anchor[3])):
        rects.append(r)
        tags.append("anchor")
    if finger is not None:
        for r in _mirror_x((finger[0], -finger[2], finger[1], finger[2])):
            rects.append(r)
            tags.append("electrode")
    return CrossSection2D.from_rectangles([tuple(v * UM for v in r) for r in rects], tags)


def resonator(thickness=4.0, layers=2, edge=1.0, fix="bottom", **kw) -> ExtrudedMesh:
    """Coupled-beam resonator benchmark mesh."""
    return extrude(resonator_section(**kw), thickness * UM, layers, edge * UM, fix=fix)


BENCHMARKS = {
    "beam": clamped_beam,
    "resonator": resonator,
}
