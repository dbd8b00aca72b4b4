# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused attention and ray casting.

Contracts match arnvs.kernels._pure exactly; see that module for docs.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel import prange
from libc.math cimport INFINITY, exp, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"

ctypedef fused real:
    float
    double


def attention_forward(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v, double scale):
    cdef Py_ssize_t B = q.shape[0], Nq = q.shape[1], D = q.shape[2], Nk = k.shape[1]
    if k.shape[0] != B or v.shape[0] != B or v.shape[1] != Nk or k.shape[2] != D or v.shape[2] != D:
        raise ValueError("attention_forward: inconsistent shapes")
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((B, Nq, D), dtype=dtype)
    probs_arr = np.empty((B, Nq, Nk), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef real[:, :, ::1] probs = probs_arr
    cdef Py_ssize_t b, i, j, d
    cdef double s, m, z, p

    for b in prange(B, nogil=True, schedule="static"):
        for i in range(Nq):
            m = -INFINITY
            for j in range(Nk):
                s = 0.0
                for d in range(D):
                    s = s + q[b, i, d] * k[b, j, d]
                s = s * scale
                probs[b, i, j] = <real> s
                if s > m:
                    m = s
            z = 0.0
            for j in range(Nk):
                s = exp(<double> probs[b, i, j] - m)
                probs[b, i, j] = <real> s
                z = z + s
            for d in range(D):
                out[b, i, d] = 0.0
            for j in range(Nk):
                p = <double> probs[b, i, j] / z
                probs[b, i, j] = <real> p
                for d in range(D):
                    out[b, i, d] = out[b, i, d] + <real> p * v[b, j, d]
    return out_arr, probs_arr


def trace_rays(
    double[::1] origin,
    double[:, ::1] dirs,
    double[:, ::1] sphere_centers,
    double[::1] sphere_radii,
    double[:, ::1] sphere_colors,
    double[::1] room_min,
    double[::1] room_max,
    double[:, ::1] face_colors,
    double[::1] light_dir,
    double ambient,
):
    cdef Py_ssize_t n_rays = dirs.shape[0], n_spheres = sphere_centers.shape[0]
    rgb_arr = np.empty((n_rays, 3), dtype=np.float64)
    depth_arr = np.empty(n_rays, dtype=np.float64)
    cdef double[:, ::1] rgb = rgb_arr
    cdef double[::1] depth = depth_arr
    cdef Py_ssize_t n, ax, s, best_axis
    cdef double d, t, t_hit, b, disc, sq, t0, t1, lam, shade
    cdef double ocx, ocy, ocz, oc2, r
    cdef double n0, n1, n2, col0, col1, col2
    cdef Py_ssize_t face

    for n in prange(n_rays, nogil=True, schedule="static"):
        # Box exit: the ray origin is inside the room, every axis bounds t.
        t_hit = INFINITY
        best_axis = 0
        for ax in range(3):
            d = dirs[n, ax]
            if d > 0.0:
                t = (room_max[ax] - origin[ax]) / d
            elif d < 0.0:
                t = (room_min[ax] - origin[ax]) / d
            else:
                t = INFINITY
            if t < t_hit:
                t_hit = t
                best_axis = ax
        n0 = 0.0
        n1 = 0.0
        n2 = 0.0
        if dirs[n, best_axis] >= 0.0:
            face = 2 * best_axis + 1
            if best_axis == 0:
                n0 = -1.0
            elif best_axis == 1:
                n1 = -1.0
            else:
                n2 = -1.0
        else:
            face = 2 * best_axis
            if best_axis == 0:
                n0 = 1.0
            elif best_axis == 1:
                n1 = 1.0
            else:
                n2 = 1.0
        col0 = face_colors[face, 0]
        col1 = face_colors[face, 1]
        col2 = face_colors[face, 2]

        for s in range(n_spheres):
            ocx = origin[0] - sphere_centers[s, 0]
            ocy = origin[1] - sphere_centers[s, 1]
            ocz = origin[2] - sphere_centers[s, 2]
            r = sphere_radii[s]
            b = dirs[n, 0] * ocx + dirs[n, 1] * ocy + dirs[n, 2] * ocz
            oc2 = ocx * ocx + ocy * ocy + ocz * ocz
            disc = b * b - (oc2 - r * r)
            if disc < 0.0:
                continue
            sq = sqrt(disc)
            t0 = -b - sq
            t1 = -b + sq
            t = t0 if t0 > 1e-9 else t1
            if t > 1e-9 and t < t_hit:
                t_hit = t
                n0 = (origin[0] + dirs[n, 0] * t - sphere_centers[s, 0]) / r
                n1 = (origin[1] + dirs[n, 1] * t - sphere_centers[s, 1]) / r
                n2 = (origin[2] + dirs[n, 2] * t - sphere_centers[s, 2]) / r
                col0 = sphere_colors[s, 0]
                col1 = sphere_colors[s, 1]
                col2 = sphere_colors[s, 2]

        lam = -(n0 * light_dir[0] + n1 * light_dir[1] + n2 * light_dir[2])
        if lam < 0.0:
            lam = 0.0
        shade = ambient + (1.0 - ambient) * lam
        depth[n] = t_hit
        rgb[n, 0] = min(max(col0 * shade, 0.0), 1.0)
        rgb[n, 1] = min(max(col1 * shade, 0.0), 1.0)
        rgb[n, 2] = min(max(col2 * shade, 0.0), 1.0)
    return rgb_arr, depth_arr
