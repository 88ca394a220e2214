"""Compiled inner loops of the coalition objective.

The population-batched cost/violation evaluation runs thousands of times
per decision step on very small arrays, where numpy dispatch overhead
dominates; this kernel does the same arithmetic in one compiled pass.
Formulas mirror costs.py exactly (same switch functions, same bound
tolerance, same finite-difference stencils) and the numpy implementations
remain the reference the tests compare against.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .costs import BOUND_TOL


@njit(cache=True, fastmath=False)
def member_cost_kernel(
    traj,  # (pop, Np, 6) predicted states
    du,  # (pop, Nc, 2) increments
    u_abs,  # (pop, Np, 2) absolute controls
    world,  # (pop, slots, Np, 5): x, y, v, phi, v_eff
    slot_idx,  # int64 (m,) same-lane slots to consider
    wall_x,  # ramp-end coordinate; NaN when the host is not on the ramp
    prev_ax,
    prev_df,
    prev_x,
    prev_y,
    prev_phi,
    beta,
    v_lane,
    center_y,
    # inner weights
    w_v_log,
    w_s_log,
    w_v_lat,
    w_s_lat,
    w_y_lk,
    w_phi_lk,
    w_jx,
    w_jy,
    w_eff,
    eps,
    l_v,
    # potential field
    pf_hbar,
    pf_sx2,  # 2 * sigma_x^2
    pf_sy2,  # 2 * sigma_y^2
    pf_rho,
    pf_sigma,
    # profile / normalization / characteristic weights
    om_s,
    om_c,
    om_e,
    norm_s,
    norm_c,
    norm_e,
    q_weight,
    r0,
    r1,
    r2,
    dt,
    wall_decel,
    # bounds
    ax_max,
    delta_max,
    dax_max,
    ddf_max,
    jx_max,
    jy_max,
    ay_max,
    kappa_max,
    min_gap,
    dy_max,
    dphi_max,
    track_active,
    nv_active,
    stop_decel,
    unwind_rate,
    lat_decel,
    road_lo,
    road_hi,
    rel_decel,
    out_shape,
    out_lam,  # (pop,)
    out_exc,  # (pop,)
):  # out_shape: soft maneuver-shaping excess, kept out of feasibility
    pop, np_steps = traj.shape[0], traj.shape[1]
    nc = du.shape[1]
    m = slot_idx.shape[0]
    keep = float((beta * beta - 1) ** 2)
    change = float(beta * beta)
    # tracking bounds never demand more than holding the current error,
    # but force steady recovery once outside (no ratcheting drift)
    cur_dy = abs(prev_y - center_y)
    dphi_lim = dphi_max
    if abs(prev_phi) > dphi_lim:
        dphi_lim = abs(prev_phi)

    for i in range(pop):
        lam = 0.0
        exc = 0.0
        shape = 0.0

        # extended y/x include the current sample for the difference stencils
        y_ext = np.empty(np_steps + 1)
        x_ext = np.empty(np_steps + 1)
        y_ext[0] = prev_y
        x_ext[0] = prev_x
        for p in range(np_steps):
            x_ext[p + 1] = traj[i, p, 4]
            y_ext[p + 1] = traj[i, p, 5]

        n_dd = np_steps - 1
        ydd = np.empty(n_dd)
        xdd = np.empty(n_dd)
        for j in range(n_dd):
            ydd[j] = (y_ext[j + 2] - 2.0 * y_ext[j + 1] + y_ext[j]) / (dt * dt)
            xdd[j] = (x_ext[j + 2] - 2.0 * x_ext[j + 1] + x_ext[j]) / (dt * dt)

        for p in range(np_steps):
            hv = traj[i, p, 0]
            hphi = traj[i, p, 3]
            hx = traj[i, p, 4]
            hy = traj[i, p, 5]

            # lead: nearest strictly ahead; neighbor: nearest overall, lead
            # excluded
            lead_j = -1
            lead_dx = 1e300
            for jj in range(m):
                sl = slot_idx[jj]
                dx = world[i, sl, p, 0] - hx
                if dx > 0.0 and dx < lead_dx:
                    lead_dx = dx
                    lead_j = jj
            nv_j = -1
            nv_dist = 1e300
            if nv_active:
                for jj in range(m):
                    if jj == lead_j:
                        continue
                    sl = slot_idx[jj]
                    dxx = world[i, sl, p, 0] - hx
                    dyy = world[i, sl, p, 1] - hy
                    d = math.sqrt(dxx * dxx + dyy * dyy)
                    if d < nv_dist:
                        nv_dist = d
                        nv_j = jj

            j_log = 0.0
            j_lc = 0.0
            v_hat = v_lane
            if lead_j >= 0:
                sl = slot_idx[lead_j]
                lx = world[i, sl, p, 0]
                ly = world[i, sl, p, 1]
                lv = world[i, sl, p, 2]
                lphi = world[i, sl, p, 3]
                lveff = world[i, sl, p, 4]
                dxx = lx - hx
                dyy = ly - hy
                dist = math.sqrt(dxx * dxx + dyy * dyy)
                gap = dist - l_v
                dv = lv - hv
                eta = 0.5 - 0.5 * (0.0 if dv == 0.0 else (1.0 if dv > 0.0 else -1.0))
                j_log = w_v_log * eta * dv * dv + w_s_log / (gap * gap + eps)
                if lveff < v_hat:
                    v_hat = lveff
                # potential field of the lead at the host position
                c = math.cos(lphi)
                s = math.sin(lphi)
                xh = c * (hx - lx) + s * (hy - ly)
                yh = -s * (hx - lx) + c * (hy - ly)
                qx = xh * xh / pf_sx2
                qq = qx + yh * yh / pf_sy2
                if qq > 0.0:
                    ups = (qx / math.sqrt(qq)) * (-1.0 if xh < 0.0 else 1.0)
                else:
                    ups = 0.0
                j_lc += pf_hbar * math.exp(-(qq**pf_rho) + pf_sigma * lv * ups)
                # minimum gap plus relative stoppability: closing speed must
                # be dissipatable at moderate braking inside the gap margin
                if min_gap - gap > BOUND_TOL:
                    exc += min_gap - gap
                margin = gap - min_gap
                if margin < 0.0:
                    margin = 0.0
                axp0 = u_abs[i, p, 0]
                debt0 = 0.5 * axp0 * axp0 / unwind_rate if axp0 > 0.0 else 0.0
                allow = lv + math.sqrt(2.0 * rel_decel * margin)
                if hv + debt0 - allow > BOUND_TOL:
                    exc += hv + debt0 - allow
            if not math.isnan(wall_x):
                # ramp end: a standing lead whose speed is the comfortable
                # stopping envelope; acts alongside any moving lead
                wall_gap = wall_x - hx - l_v
                g = wall_gap if wall_gap > 0.0 else 0.0
                env = math.sqrt(2.0 * wall_decel * g)
                dv = env - hv
                eta = 0.5 - 0.5 * (0.0 if dv == 0.0 else (1.0 if dv > 0.0 else -1.0))
                j_log += w_v_log * eta * dv * dv + w_s_log / (wall_gap * wall_gap + eps)
                if min_gap - wall_gap > BOUND_TOL:
                    exc += min_gap - wall_gap
                # hard stoppability: the speed that remains after unwinding
                # any commanded acceleration must fit the braking envelope
                env_stop = math.sqrt(2.0 * stop_decel * g)
                axp = u_abs[i, p, 0]
                debt = 0.5 * axp * axp / unwind_rate if axp > 0.0 else 0.0
                if hv + debt - env_stop > BOUND_TOL:
                    exc += hv + debt - env_stop
            j_lat = 0.0
            if nv_j >= 0:
                sl = slot_idx[nv_j]
                nx = world[i, sl, p, 0]
                ny = world[i, sl, p, 1]
                nv = world[i, sl, p, 2]
                nphi = world[i, sl, p, 3]
                gap = nv_dist - l_v
                dv = hv - nv
                eta = 0.5 - 0.5 * (0.0 if dv == 0.0 else (1.0 if dv > 0.0 else -1.0))
                j_lat = w_v_lat * eta * dv * dv + w_s_lat / (gap * gap + eps)
                # minimum gap plus relative stoppability toward the neighbor
                if min_gap - gap > BOUND_TOL:
                    exc += min_gap - gap
                margin = gap - min_gap
                if margin < 0.0:
                    margin = 0.0
                dxx = nx - hx
                closing = (hv - nv) if dxx > 0.0 else (nv - hv)
                allow = math.sqrt(2.0 * rel_decel * margin)
                if closing - allow > BOUND_TOL:
                    exc += closing - allow
                c = math.cos(nphi)
                s = math.sin(nphi)
                xh = c * (hx - nx) + s * (hy - ny)
                yh = -s * (hx - nx) + c * (hy - ny)
                qx = xh * xh / pf_sx2
                qq = qx + yh * yh / pf_sy2
                if qq > 0.0:
                    ups = (qx / math.sqrt(qq)) * (-1.0 if xh < 0.0 else 1.0)
                else:
                    ups = 0.0
                j_lc += pf_hbar * math.exp(-(qq**pf_rho) + pf_sigma * nv * ups)

            dy = hy - center_y
            j_lk = w_y_lk * dy * dy + w_phi_lk * hphi * hphi
            j_s = keep * j_log + change * j_lat + keep * j_lk + j_lc

            jx = du[i, p, 0] / dt if p < nc else 0.0
            if 1 <= p <= n_dd - 1:
                jy = (ydd[p] - ydd[p - 1]) / dt
            else:
                jy = 0.0
            j_c = w_jx * jx * jx + w_jy * jy * jy

            # efficiency tracks the settle speed: where the jerk-limited
            # unwind of the held acceleration will leave the vehicle
            axp = u_abs[i, p, 0]
            settle = hv + (axp * axp / (2.0 * unwind_rate) if axp > 0.0 else -axp * axp / (2.0 * unwind_rate))
            dv_eff = settle - v_hat
            j_e = w_eff * dv_eff * dv_eff

            j_total = om_s * (j_s / norm_s) + om_c * (j_c / norm_c) + om_e * (j_e / norm_e)
            lam += q_weight * j_total * j_total

            # state bounds at this step
            sp = abs(hv) - v_lane
            if sp > BOUND_TOL:
                exc += sp
            if track_active:
                dy_lim = cur_dy - 0.1 * dt * (p - 1) if p >= 2 else cur_dy
                if dy_lim < dy_max:
                    dy_lim = dy_max
                over = abs(hy - center_y) - dy_lim
                if over > BOUND_TOL:
                    exc += over
                over = abs(hphi) - dphi_lim
                if over > BOUND_TOL:
                    exc += over
            else:
                # lateral maneuver: stay inside the corridor between the
                # start offset and the target center (hard, small slack);
                # keep the approach speed inside the settle envelope (soft)
                d = hy - center_y
                over = abs(d) - (cur_dy if cur_dy > dy_max else dy_max) - 0.3
                if over > BOUND_TOL:
                    exc += over
                over = abs(d) - (cur_dy if cur_dy > dy_max else dy_max)
                if over > BOUND_TOL:
                    shape += over
                wlat = hv * math.sin(hphi) + traj[i, p, 1] * math.cos(hphi)
                if wlat * d < 0.0:
                    cap = math.sqrt(2.0 * lat_decel * (abs(d) + dy_max))
                    if abs(wlat) - cap > BOUND_TOL:
                        shape += abs(wlat) - cap

            # stay on the paved road
            if road_lo - hy > BOUND_TOL:
                exc += road_lo - hy
            elif hy - road_hi > BOUND_TOL:
                exc += hy - road_hi

        # decision effort
        for qstep in range(nc):
            lam += du[i, qstep, 0] * du[i, qstep, 0] * r0
            lam += du[i, qstep, 1] * du[i, qstep, 1] * r1
            lam += change * r2

        # control bounds, rates and longitudinal jerk
        last_ax = prev_ax
        last_df = prev_df
        for p in range(np_steps):
            ax = u_abs[i, p, 0]
            df = u_abs[i, p, 1]
            over = abs(ax) - ax_max
            if over > BOUND_TOL:
                exc += over
            over = abs(df) - delta_max
            if over > BOUND_TOL:
                exc += over
            dax = abs(ax - last_ax)
            over = dax - dax_max
            if over > BOUND_TOL:
                exc += over
            over = abs(df - last_df) - ddf_max
            if over > BOUND_TOL:
                exc += over
            over = dax / dt - jx_max
            if over > BOUND_TOL:
                exc += over
            last_ax = ax
            last_df = df

        # lateral acceleration, lateral jerk, curvature
        for j in range(n_dd):
            over = abs(ydd[j]) - ay_max
            if over > BOUND_TOL:
                exc += over
            if j >= 1:
                over = abs(ydd[j] - ydd[j - 1]) / dt - jy_max
                if over > BOUND_TOL:
                    exc += over
            xd = (x_ext[j + 1] - x_ext[j]) / dt
            yd = (y_ext[j + 1] - y_ext[j]) / dt
            spd = xd * xd + yd * yd
            if spd < 1e-12:
                spd = 1e-12
            kappa = abs(xd * ydd[j] - xdd[j] * yd) / spd**1.5
            over = kappa - kappa_max
            if over > BOUND_TOL:
                exc += over

        out_lam[i] = lam
        out_exc[i] = exc
        out_shape[i] = shape
