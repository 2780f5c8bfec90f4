# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed loop.

Mirrors ``_pysim`` step for step, with forward kinematics, the IK solve and
the dense flow written as plain C loops over small fixed-size buffers.
"""

import numpy as np

from libc.math cimport cos, sin, sqrt, acos, fabs, isfinite

from .sensors import ScenarioFault
from ._pysim import SimulationAbort

DEF MAXJ = 32


cdef inline void rodrigues(const double* a, double angle, double* R) noexcept nogil:
    cdef double x = a[0], y = a[1], z = a[2]
    cdef double s = sin(angle), c = cos(angle), C = 1.0 - c
    R[0] = c + x * x * C
    R[1] = x * y * C - z * s
    R[2] = x * z * C + y * s
    R[3] = y * x * C + z * s
    R[4] = c + y * y * C
    R[5] = y * z * C - x * s
    R[6] = z * x * C - y * s
    R[7] = z * y * C + x * s
    R[8] = c + z * z * C


cdef inline void matmul3(const double* A, const double* B, double* out) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = A[3 * i] * B[j] + A[3 * i + 1] * B[3 + j] + A[3 * i + 2] * B[6 + j]


cdef inline void matvec3(const double* A, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = A[3 * i] * v[0] + A[3 * i + 1] * v[1] + A[3 * i + 2] * v[2]


cdef inline void matTvec3(const double* A, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = A[i] * v[0] + A[3 + i] * v[1] + A[6 + i] * v[2]


cdef inline void cross3(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef struct Chain:
    int n
    int upto
    double axes[MAXJ][3]
    double offR[MAXJ][9]
    double offt[MAXJ][3]
    int imu_joint
    double imuR[9]
    double imut[3]
    int cam_joint
    double camR[9]
    double camt[3]


cdef struct Frames:
    double R[MAXJ][9]
    double p[MAXJ][3]
    double a[MAXJ][3]


cdef void fk(const Chain* ch, const double* q, Frames* fr) noexcept nogil:
    cdef double R[9]
    cdef double tmp[9]
    cdef double rot[9]
    cdef double p[3]
    cdef double d[3]
    cdef int i, m
    for m in range(9):
        R[m] = 1.0 if m % 4 == 0 else 0.0
    p[0] = 0.0
    p[1] = 0.0
    p[2] = 0.0
    for i in range(ch.upto):
        matvec3(R, ch.offt[i], d)
        for m in range(3):
            p[m] = p[m] + d[m]
        matmul3(R, ch.offR[i], tmp)
        rodrigues(ch.axes[i], q[i], rot)
        matmul3(tmp, rot, R)
        for m in range(9):
            fr.R[i][m] = R[m]
        for m in range(3):
            fr.p[i][m] = p[m]
        matvec3(R, ch.axes[i], fr.a[i])


cdef inline void frame_pose(const Frames* fr, int joint, const double* offR, const double* offt,
                            double* R, double* c) noexcept nogil:
    cdef int m
    matmul3(fr.R[joint], offR, R)
    matvec3(fr.R[joint], offt, c)
    for m in range(3):
        c[m] = c[m] + fr.p[joint][m]


cdef void twist(const Frames* fr, int joint, const double* point, const double* qdot,
                double* v, double* w) noexcept nogil:
    """World linear velocity of ``point`` and angular velocity of the link ``joint``."""
    cdef int i, m
    cdef double r[3]
    cdef double cr[3]
    for m in range(3):
        v[m] = 0.0
        w[m] = 0.0
    for i in range(joint + 1):
        if qdot[i] == 0.0:
            continue
        for m in range(3):
            r[m] = point[m] - fr.p[i][m]
        cross3(fr.a[i], r, cr)
        for m in range(3):
            w[m] = w[m] + fr.a[i][m] * qdot[i]
            v[m] = v[m] + cr[m] * qdot[i]


cdef inline double plane_depth(const double* R, const double* c, const double* P, const double* nrm) noexcept nogil:
    """Depth along the optical axis; returns -1 when the plane is not ahead."""
    cdef double denom = R[2] * nrm[0] + R[5] * nrm[1] + R[8] * nrm[2]
    if denom >= 0.0:
        return -1.0
    return ((P[0] - c[0]) * nrm[0] + (P[1] - c[1]) * nrm[1] + (P[2] - c[2]) * nrm[2]) / denom


cdef inline void centre_slip(const double* v, const double* w, double Z, double f, double* out) noexcept nogil:
    out[0] = f / Z * v[0] + f * w[1]
    out[1] = f / Z * v[1] - f * w[0]


cdef double sym3_min_eig(const double* A) noexcept nogil:
    """Smallest eigenvalue of a symmetric 3x3 matrix (closed form)."""
    cdef double p1 = A[1] * A[1] + A[2] * A[2] + A[5] * A[5]
    cdef double q, p2, p, r, phi, e1, e3
    cdef double B[9]
    cdef int m
    if p1 == 0.0:
        e1 = A[0]
        if A[4] < e1:
            e1 = A[4]
        if A[8] < e1:
            e1 = A[8]
        return e1
    q = (A[0] + A[4] + A[8]) / 3.0
    p2 = (A[0] - q) ** 2 + (A[4] - q) ** 2 + (A[8] - q) ** 2 + 2.0 * p1
    p = sqrt(p2 / 6.0)
    for m in range(9):
        B[m] = A[m] / p
    B[0] -= q / p
    B[4] -= q / p
    B[8] -= q / p
    r = (B[0] * (B[4] * B[8] - B[5] * B[7]) - B[1] * (B[3] * B[8] - B[5] * B[6])
         + B[2] * (B[3] * B[7] - B[4] * B[6])) / 2.0
    if r <= -1.0:
        phi = 3.141592653589793 / 3.0
    elif r >= 1.0:
        phi = 0.0
    else:
        phi = acos(r) / 3.0
    e1 = q + 2.0 * p * cos(phi)
    e3 = q + 2.0 * p * cos(phi + 2.0 * 3.141592653589793 / 3.0)
    return e3


cdef int solve3(double* A, double* b) noexcept nogil:
    """Gaussian elimination with partial pivoting, in place; b holds the result."""
    cdef int i, j, k, piv
    cdef double m, t
    for k in range(3):
        piv = k
        for i in range(k + 1, 3):
            if fabs(A[3 * i + k]) > fabs(A[3 * piv + k]):
                piv = i
        if A[3 * piv + k] == 0.0:
            return -1
        if piv != k:
            for j in range(3):
                t = A[3 * k + j]
                A[3 * k + j] = A[3 * piv + j]
                A[3 * piv + j] = t
            t = b[k]
            b[k] = b[piv]
            b[piv] = t
        for i in range(k + 1, 3):
            m = A[3 * i + k] / A[3 * k + k]
            for j in range(k, 3):
                A[3 * i + j] -= m * A[3 * k + j]
            b[i] -= m * b[k]
    for i in range(2, -1, -1):
        t = b[i]
        for j in range(i + 1, 3):
            t -= A[3 * i + j] * b[j]
        b[i] = t / A[3 * i + i]
    return 0


def simulate(plan):
    from .scenarios import SimulationTrace

    cfg = plan.cfg
    cdef int N = plan.n_ticks
    cdef double dt = plan.dt
    cdef int n = len(plan.axes)
    if n > MAXJ:
        raise ValueError(f"compiled loop supports at most {MAXJ} joints")
    cdef long[::1] ctrl = np.ascontiguousarray(plan.ctrl, dtype=np.int_)
    cdef long[::1] vol = np.ascontiguousarray(plan.voluntary, dtype=np.int_)
    cdef int nc = ctrl.shape[0]
    cdef int nv = vol.shape[0]
    cdef int yaw_slot = plan.eye_slots[0], pitch_slot = plan.eye_slots[1]
    cdef double f = cfg.focal, Zt = cfg.target_distance
    cdef double k_vor = cfg.k_vor, k_okr = cfg.k_okr, Kp = cfg.ik.Kp
    cdef int mode = plan.mode, combiner = plan.combiner
    cdef int combined = mode == 4
    cdef int reaf_mode = combined and combiner == 0
    cdef int use_ik = mode == 1 or combined
    cdef int record_flow = cfg.record_flow
    cdef double vol_yaw = cfg.voluntary_eye_rate[0], vol_pitch = cfg.voluntary_eye_rate[1]
    cdef int pert_joint = plan.pert_joint
    cdef int gyro_delay = plan.gyro_delay, cam_delay = plan.cam_delay

    cdef Chain ch
    cdef int i, j, m, k
    ch.n = n
    axes = np.ascontiguousarray(plan.axes)
    offR = np.ascontiguousarray(plan.off_R).reshape(n, 9)
    offt = np.ascontiguousarray(plan.off_t)
    for i in range(n):
        for m in range(3):
            ch.axes[i][m] = axes[i, m]
            ch.offt[i][m] = offt[i, m]
        for m in range(9):
            ch.offR[i][m] = offR[i, m]
    ch.imu_joint = plan.imu_joint
    ch.cam_joint = plan.cam_joint
    ch.upto = max(ch.imu_joint, ch.cam_joint) + 1
    imuR = np.ascontiguousarray(plan.imu_R).ravel()
    camR = np.ascontiguousarray(plan.cam_R).ravel()
    for m in range(9):
        ch.imuR[m] = imuR[m]
        ch.camR[m] = camR[m]
    for m in range(3):
        ch.imut[m] = plan.imu_t[m]
        ch.camt[m] = plan.cam_t[m]

    cdef signed char[::1] measured = np.ascontiguousarray(plan.measured, dtype=np.int8)
    cdef double[::1] lower = np.ascontiguousarray(plan.lower)
    cdef double[::1] upper = np.ascontiguousarray(plan.upper)
    cdef double[::1] maxvel = np.ascontiguousarray(plan.max_velocity)
    cdef double[::1] reg = np.ascontiguousarray(plan.reg)
    cdef double[::1] pert_q = plan.pert_q
    cdef double[::1] pert_qdot = plan.pert_qdot
    cdef double[:, ::1] target_off = plan.target_off
    cdef double[:, ::1] target_vel = plan.target_vel
    cdef double P0[3]
    cdef double nrm[3]
    cdef double xdes[3]
    for m in range(3):
        P0[m] = plan.target_p0[m]
        nrm[m] = plan.normal[m]
        xdes[m] = plan.x_des[m]
    cdef signed char[::1] gyro_mask = plan.gyro_mask
    cdef signed char[::1] cam_mask = plan.cam_mask
    cdef double[:, ::1] gyro_noise = np.ascontiguousarray(plan.gyro_noise)
    cdef double[:, ::1] cam_noise = np.ascontiguousarray(plan.cam_noise)
    cdef double[::1] gu = np.ascontiguousarray(plan.grid_u)
    cdef double[::1] gv = np.ascontiguousarray(plan.grid_v)
    cdef int gw = gu.shape[0], gh = gv.shape[0]
    cdef int n_frames = int(np.sum(plan.cam_mask)) if record_flow else 0

    # outputs
    out_q = np.zeros((N, n))
    out_qdot = np.zeros((N, n))
    out_cmd = np.zeros((N, nc))
    out_ik = np.zeros((N, nc))
    out_vor = np.zeros((N, 2))
    out_okr = np.zeros((N, 2))
    out_gtrue = np.zeros((N, 3))
    out_gaff = np.zeros((N, 3))
    out_greaf = np.zeros((N, 3))
    out_gexaf = np.zeros((N, 3))
    out_strue = np.zeros((N, 2))
    out_saff = np.zeros((N, 2))
    out_sreaf = np.zeros((N, 2))
    out_sexaf = np.zeros((N, 2))
    out_gemit = np.zeros(N, dtype=np.int8)
    out_cemit = np.zeros(N, dtype=np.int8)
    out_flow = np.zeros((n_frames, gh, gw, 2))
    out_flow_t = np.zeros(n_frames)
    out_flow_frame = np.zeros(n_frames, dtype=np.int64)
    vel_clamps_a = np.zeros(nc, dtype=np.int64)
    pos_clamps_a = np.zeros(nc, dtype=np.int64)
    enc_slip_a = np.zeros((N, 2))
    imu2cam_a = np.zeros((N, 9))
    gexaf_at_a = np.zeros((N, 3))
    gexaf_valid_a = np.zeros(N, dtype=np.int8)

    cdef double[:, ::1] Oq = out_q
    cdef double[:, ::1] Oqd = out_qdot
    cdef double[:, ::1] Ocmd = out_cmd
    cdef double[:, ::1] Oik = out_ik
    cdef double[:, ::1] Ovor = out_vor
    cdef double[:, ::1] Ookr = out_okr
    cdef double[:, ::1] Ogt = out_gtrue
    cdef double[:, ::1] Oga = out_gaff
    cdef double[:, ::1] Ogr = out_greaf
    cdef double[:, ::1] Oge = out_gexaf
    cdef double[:, ::1] Ost = out_strue
    cdef double[:, ::1] Osa = out_saff
    cdef double[:, ::1] Osr = out_sreaf
    cdef double[:, ::1] Ose = out_sexaf
    cdef signed char[::1] Ogemit = out_gemit
    cdef signed char[::1] Ocemit = out_cemit
    cdef double[:, :, :, ::1] Oflow = out_flow
    cdef double[::1] Oflow_t = out_flow_t
    cdef long long[::1] Oflow_frame = out_flow_frame
    cdef long long[::1] vel_clamps = vel_clamps_a
    cdef long long[::1] pos_clamps = pos_clamps_a
    cdef double[:, ::1] enc_slip = enc_slip_a
    cdef double[:, ::1] imu2cam = imu2cam_a
    cdef double[:, ::1] gexaf_at = gexaf_at_a
    cdef signed char[::1] gexaf_valid = gexaf_valid_a

    cdef double q[MAXJ]
    cdef double qdot[MAXJ]
    cdef double qe[MAXJ]
    cdef double qde[MAXJ]
    cdef double cmd[MAXJ]
    cdef double new[MAXJ]
    cdef double ikc[MAXJ]
    cdef double J[3][MAXJ]
    cdef Frames fr
    cdef double Rc[9]
    cdef double Ri[9]
    cdef double c[3]
    cdef double ci[3]
    cdef double v[3]
    cdef double w[3]
    cdef double vl[3]
    cdef double wl[3]
    cdef double tmp3[3]
    cdef double P[3]
    cdef double Pv[3]
    cdef double slip[2]
    cdef double g_aff[3]
    cdef double g_exaf[3]
    cdef double s_aff[2]
    cdef double s_exaf[2]
    cdef double s_reaf[2]
    cdef double vorc[2]
    cdef double okrc[2]
    cdef double pfix[3]
    cdef double xff[3]
    cdef double xd[3]
    cdef double r[3]
    cdef double A[9]
    cdef double JJ[9]
    cdef double M[9]
    cdef double y[3]
    cdef double Z, t, val, lam
    cdef int s_valid = 0
    cdef int gi = 0, si = 0, frame_idx = 0, fi = 0, cap, jj, jc
    cdef long singular = 0
    cdef long faults = 0
    cdef double U, V, dz, Zp, du, dv
    cdef double ncam[3]

    for m in range(MAXJ):
        q[m] = 0.0
        qdot[m] = 0.0
        cmd[m] = 0.0
    for m in range(3):
        g_aff[m] = 0.0
        g_exaf[m] = 0.0
    for m in range(2):
        s_aff[m] = 0.0
        s_exaf[m] = 0.0
        s_reaf[m] = 0.0

    for k in range(N):
        t = k * dt
        if k > 0:
            for i in range(nc):
                jc = ctrl[i]
                val = q[jc] + dt * cmd[i]
                if val < lower[jc]:
                    val = lower[jc]
                elif val > upper[jc]:
                    val = upper[jc]
                q[jc] = val
                qdot[jc] = cmd[i]
        if pert_joint >= 0:
            q[pert_joint] = pert_q[k]
            qdot[pert_joint] = pert_qdot[k]
        for m in range(3):
            P[m] = P0[m] + target_off[k, m]
            Pv[m] = target_vel[k, m]

        # ground truth on the full state
        fk(&ch, q, &fr)
        frame_pose(&fr, ch.imu_joint, ch.imuR, ch.imut, Ri, ci)
        twist(&fr, ch.imu_joint, ci, qdot, v, w)
        matTvec3(Ri, w, tmp3)
        for m in range(3):
            Ogt[k, m] = tmp3[m]
        frame_pose(&fr, ch.cam_joint, ch.camR, ch.camt, Rc, c)
        twist(&fr, ch.cam_joint, c, qdot, v, w)
        Z = plane_depth(Rc, c, P, nrm)
        if not Z > 0.0:
            raise ScenarioFault(f"visual target not in front of the camera at tick {k}")
        for m in range(3):
            tmp3[m] = v[m] - Pv[m]
        matTvec3(Rc, tmp3, vl)
        matTvec3(Rc, w, wl)
        centre_slip(vl, wl, Z, f, slip)
        Ost[k, 0] = slip[0]
        Ost[k, 1] = slip[1]
        if not (isfinite(Ogt[k, 0]) and isfinite(Ogt[k, 1]) and isfinite(Ogt[k, 2])
                and isfinite(slip[0]) and isfinite(slip[1])):
            raise SimulationAbort(f"non-finite ground truth at tick {k}")

        # forward model on the encoder state
        for i in range(n):
            qe[i] = q[i] if measured[i] else 0.0
            qde[i] = qdot[i] if measured[i] else 0.0
        fk(&ch, qe, &fr)
        frame_pose(&fr, ch.imu_joint, ch.imuR, ch.imut, Ri, ci)
        twist(&fr, ch.imu_joint, ci, qde, v, w)
        matTvec3(Ri, w, tmp3)
        for m in range(3):
            Ogr[k, m] = tmp3[m]
        frame_pose(&fr, ch.cam_joint, ch.camR, ch.camt, Rc, c)
        twist(&fr, ch.cam_joint, c, qde, v, w)
        Z = plane_depth(Rc, c, P0, nrm)
        if not Z > 0.0:
            raise ScenarioFault(f"nominal target not in front of the predicted camera at tick {k}")
        matTvec3(Rc, v, vl)
        matTvec3(Rc, w, wl)
        centre_slip(vl, wl, Z, f, slip)
        enc_slip[k, 0] = slip[0]
        enc_slip[k, 1] = slip[1]
        # R_cam^T R_imu
        for i in range(3):
            for j in range(3):
                imu2cam[k, 3 * i + j] = Rc[i] * Ri[j] + Rc[3 + i] * Ri[3 + j] + Rc[6 + i] * Ri[6 + j]

        # gyro
        if gyro_mask[k] and k >= gyro_delay:
            cap = k - gyro_delay
            for m in range(3):
                g_aff[m] = Ogt[cap, m] + gyro_noise[gi, m]
                g_exaf[m] = g_aff[m] - Ogr[cap, m]
                gexaf_at[cap, m] = g_exaf[m]
            gexaf_valid[cap] = 1
            gi += 1
            Ogemit[k] = 1
        # camera
        if cam_mask[k] and k >= cam_delay:
            cap = k - cam_delay
            jj = cap
            while jj >= 0 and not gexaf_valid[jj]:
                jj -= 1
            for m in range(3):
                tmp3[m] = 0.0
            if jj >= 0:
                for i in range(3):
                    tmp3[i] = (imu2cam[cap, 3 * i] * gexaf_at[jj, 0] + imu2cam[cap, 3 * i + 1] * gexaf_at[jj, 1]
                               + imu2cam[cap, 3 * i + 2] * gexaf_at[jj, 2])
            s_reaf[0] = enc_slip[cap, 0] + f * tmp3[1]
            s_reaf[1] = enc_slip[cap, 1] - f * tmp3[0]
            for m in range(2):
                s_aff[m] = Ost[cap, m] + cam_noise[si, m]
                s_exaf[m] = s_aff[m] - s_reaf[m]
            si += 1
            s_valid = 1
            Ocemit[k] = 1

        # IK on the encoder state (frames already hold the encoder FK)
        for i in range(nc):
            ikc[i] = 0.0
        if use_ik:
            for m in range(3):
                pfix[m] = c[m] + Zt * Rc[3 * m + 2]
                xff[m] = 0.0
            for i in range(nv):
                jc = vol[i]
                if jc > ch.cam_joint:
                    continue
                for m in range(3):
                    r[m] = pfix[m] - fr.p[jc][m]
                cross3(fr.a[jc], r, tmp3)
                for m in range(3):
                    xff[m] = xff[m] + tmp3[m] * qde[jc]
            for m in range(3):
                xd[m] = Kp * (xdes[m] - pfix[m]) - xff[m]
            for i in range(nc):
                jc = ctrl[i]
                if jc > ch.cam_joint:
                    for m in range(3):
                        J[m][i] = 0.0
                    continue
                for m in range(3):
                    r[m] = pfix[m] - fr.p[jc][m]
                cross3(fr.a[jc], r, tmp3)
                for m in range(3):
                    J[m][i] = tmp3[m]
            for i in range(3):
                for j in range(3):
                    val = 0.0
                    lam = 0.0
                    for m in range(nc):
                        val = val + J[i][m] * J[j][m] / reg[m]
                        lam = lam + J[i][m] * J[j][m]
                    A[3 * i + j] = val + (1.0 if i == j else 0.0)
                    JJ[3 * i + j] = lam
            if sym3_min_eig(JJ) < 1e-8:
                singular += 1
            if xd[0] != 0.0 or xd[1] != 0.0 or xd[2] != 0.0:
                for m in range(3):
                    y[m] = xd[m]
                solve3(A, y)
                for i in range(nc):
                    ikc[i] = (J[0][i] * y[0] + J[1][i] * y[1] + J[2][i] * y[2]) / reg[i]

        # reflexes
        if reaf_mode:
            vorc[0] = -k_vor * g_exaf[2]
            vorc[1] = -k_vor * g_exaf[1]
        else:
            vorc[0] = -k_vor * g_aff[2]
            vorc[1] = -k_vor * g_aff[1]
        if s_valid:
            if reaf_mode:
                okrc[0] = k_okr * s_exaf[0]
                okrc[1] = k_okr * s_exaf[1]
            else:
                okrc[0] = k_okr * s_aff[0]
                okrc[1] = k_okr * s_aff[1]
        else:
            okrc[0] = 0.0
            okrc[1] = 0.0

        for i in range(nc):
            new[i] = 0.0
        if combined:
            for i in range(nc):
                new[i] = ikc[i]
            new[yaw_slot] += vorc[0] + okrc[0]
            new[pitch_slot] += vorc[1] + okrc[1]
            if combiner == 2:
                for i in range(nc):
                    new[i] = new[i] / 3.0
        elif mode == 1:
            for i in range(nc):
                new[i] = ikc[i]
        elif mode == 2:
            new[yaw_slot] = vorc[0]
            new[pitch_slot] = vorc[1]
        elif mode == 3:
            new[yaw_slot] = okrc[0]
            new[pitch_slot] = okrc[1]
        new[yaw_slot] += vol_yaw
        new[pitch_slot] += vol_pitch
        for i in range(nc):
            if not isfinite(new[i]):
                raise SimulationAbort(f"non-finite command at tick {k}")

        for i in range(nc):
            jc = ctrl[i]
            if fabs(new[i]) > maxvel[i]:
                vel_clamps[i] += 1
                new[i] = maxvel[i] if new[i] > 0 else -maxvel[i]
            if (q[jc] >= upper[jc] and new[i] > 0) or (q[jc] <= lower[jc] and new[i] < 0):
                pos_clamps[i] += 1
                new[i] = 0.0
            cmd[i] = new[i]
            qdot[jc] = new[i]

        for i in range(n):
            Oq[k, i] = q[i]
            Oqd[k, i] = qdot[i]
        for i in range(nc):
            Ocmd[k, i] = cmd[i]
            Oik[k, i] = ikc[i]
        Ovor[k, 0] = vorc[0]
        Ovor[k, 1] = vorc[1]
        Ookr[k, 0] = okrc[0]
        Ookr[k, 1] = okrc[1]
        for m in range(3):
            Oga[k, m] = g_aff[m]
            Oge[k, m] = g_exaf[m]
        for m in range(2):
            Osa[k, m] = s_aff[m]
            Osr[k, m] = s_reaf[m]
            Ose[k, m] = s_exaf[m]

        if cam_mask[k]:
            if record_flow:
                fk(&ch, q, &fr)
                frame_pose(&fr, ch.cam_joint, ch.camR, ch.camt, Rc, c)
                twist(&fr, ch.cam_joint, c, qdot, v, w)
                for m in range(3):
                    tmp3[m] = v[m] - Pv[m]
                matTvec3(Rc, tmp3, vl)
                matTvec3(Rc, w, wl)
                matTvec3(Rc, nrm, ncam)
                dz = (P[0] - c[0]) * nrm[0] + (P[1] - c[1]) * nrm[1] + (P[2] - c[2]) * nrm[2]
                for i in range(gh):
                    V = gv[i]
                    for j in range(gw):
                        U = gu[j]
                        Zp = dz / (-U / f * ncam[0] - V / f * ncam[1] + ncam[2])
                        if not Zp > 0.0:
                            raise ScenarioFault(f"scene plane not in front of every pixel at tick {k}")
                        du = (f / Zp * vl[0] + U / Zp * vl[2] - U * V / f * wl[0]
                              + (f + U * U / f) * wl[1] + V * wl[2])
                        dv = (f / Zp * vl[1] + V / Zp * vl[2] - (f + V * V / f) * wl[0]
                              + U * V / f * wl[1] - U * wl[2])
                        Oflow[fi, i, j, 0] = du
                        Oflow[fi, i, j, 1] = dv
                Oflow_t[fi] = t
                Oflow_frame[fi] = frame_idx
                fi += 1
            frame_idx += 1

    return SimulationTrace(
        cfg=cfg,
        t=np.arange(N) * dt,
        q=out_q,
        qdot=out_qdot,
        cmd=out_cmd,
        ik=out_ik,
        vor=out_vor,
        okr=out_okr,
        gyro_true=out_gtrue,
        gyro_aff=out_gaff,
        gyro_reaf=out_greaf,
        gyro_exaf=out_gexaf,
        slip_true=out_strue,
        slip_aff=out_saff,
        slip_reaf=out_sreaf,
        slip_exaf=out_sexaf,
        gyro_emit=out_gemit.astype(bool),
        cam_emit=out_cemit.astype(bool),
        flow=out_flow,
        flow_t=out_flow_t,
        flow_frame=out_flow_frame,
        velocity_clamps=vel_clamps_a,
        position_clamps=pos_clamps_a,
        singular_ticks=int(singular),
        faults=int(faults),
        backend="c",
    )
