"""Straight-line scalar reference implementations.

These deliberately share no code with the package: plain ``math`` on
Python floats, one pixel and one channel at a time.
"""

import math

R_MIN = 0.045


def dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def unit(a):
    n = math.sqrt(dot3(a, a))
    return (a[0] / n, a[1] / n, a[2] / n)


def ggx(nh, r):
    a2 = r * r * r * r
    q = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (math.pi * q * q)


def schlick(s, vh, literal=False):
    w = vh**5 if literal else (1.0 - vh) ** 5
    return s + (1.0 - s) * w


def smith(nv, nl, r):
    k = r * r / 2.0
    return nv / (nv * (1.0 - k) + k) * nl / (nl * (1.0 - k) + k)


def brdf_channel(n, v, l, d, r, s, literal=False, specular=True):
    """Reflectance of one channel."""
    out = d * (1.0 - s) / math.pi
    if not specular:
        return out
    h = unit((v[0] + l[0], v[1] + l[1], v[2] + l[2]))
    nv = max(dot3(n, v), 1e-6)
    nl = max(dot3(n, l), 1e-6)
    return out + ggx(dot3(n, h), r) * smith(nv, nl, r) * schlick(s, dot3(v, h), literal) / (4.0 * nv * nl)


def shade_channel(n, v, l, d, r, s, i, literal=False, specular=True):
    cos = max(dot3(n, l), 0.0)
    if cos == 0.0:
        return 0.0
    return i * cos * brdf_channel(n, v, l, d, r, s, literal, specular)


def pixel_position(depth, res, row, col):
    hw = depth * math.tan(math.radians(14.0))
    return ((2 * col + 1) / res - 1) * hw, (1 - (2 * row + 1) / res) * hw, depth


def light_position(k, radius=225.0):
    a = math.radians(30.0 * k)
    return radius * math.sin(a), radius * math.cos(a), 0.0


def render_pixel(maps, light, depth, row, col, intensity=(2.0, 2.0, 2.0), radius=225.0,
                 falloff=True, literal=False, specular=True, light_pos=None):
    """One RGB pixel of a render, recomputing the geometry from scratch."""
    res = maps.normals.shape[0]
    px, py, pz = pixel_position(depth, res, row, col)
    lx, ly, lz = light_pos if light_pos is not None else light_position(light, radius)
    vec = (lx - px, ly - py, pz - lz)
    dist2 = dot3(vec, vec)
    l = unit(vec)
    att = (depth * depth + radius * radius) / dist2 if falloff else 1.0
    n = tuple(float(c) for c in maps.normals[row, col])
    r = float(maps.roughness[row, col])
    return [
        att * shade_channel(n, (0.0, 0.0, 1.0), l, float(maps.diffuse[row, col, c]), r,
                            float(maps.specular[row, col, c]), intensity[c], literal, specular)
        for c in range(3)
    ]


def tonemap(x):
    return (math.log(x + 0.01) - math.log(0.01)) / (math.log(1.01) - math.log(0.01))
