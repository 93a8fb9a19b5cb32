//! Dormand–Prince 5(4) with embedded error control and the standard
//! fourth-order continuous extension for dense output.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// difference between the 5th- and 4th-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Clone, Copy, Debug)]
pub struct Dopri5Options {
    pub atol: f64,
    pub rtol: f64,
    /// Steps shorter than this (relative to `|t|`, floor 1e-14) abort.
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Self {
            atol: 1e-8,
            rtol: 1e-8,
            min_step: 1e-14,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dopri5Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integrates `y' = f(t, y)` from `t0` and returns `y` at each of the
/// ascending output times (all `>= t0`), read off the dense interpolant.
pub fn integrate_dense<Fn>(
    mut f: Fn,
    t0: f64,
    y0: &[f64],
    t_out: &[f64],
    opts: &Dopri5Options,
) -> Result<(Vec<Vec<f64>>, Dopri5Stats)>
where
    Fn: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y0.len();
    let mut stats = Dopri5Stats::default();
    let mut out = Vec::with_capacity(t_out.len());
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().is_some_and(|&t| t < t0) {
        return Err(Error::contract("output times must be ascending and >= t0"));
    }
    let t_end = match t_out.last() {
        Some(&t) => t,
        None => return Ok((out, stats)),
    };

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    );
    let mut y1 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut cont = vec![[0.0f64; 5]; dim];
    f(t, &y, &mut k1);
    stats.evaluations += 1;

    let mut next_out = 0;
    while next_out < t_out.len() && t_out[next_out] == t0 {
        out.push(y.clone());
        next_out += 1;
    }

    let mut h = initial_step(&mut f, t, &y, &k1, t_end - t, opts, &mut stats);
    let mut last_rejected = false;

    while next_out < t_out.len() {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("exceeded {} steps", opts.max_steps),
            });
        }
        let floor = opts.min_step * t.abs().max(1.0);
        if h < floor {
            return Err(Error::Integration {
                t,
                reason: format!("step size {h:e} underflowed"),
            });
        }
        if t + h > t_end {
            h = t_end - t;
        }

        for i in 0..dim {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, &tmp, &mut k4);
        for i in 0..dim {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, &tmp, &mut k5);
        for i in 0..dim {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, &tmp, &mut k6);
        for i in 0..dim {
            y1[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + h, &y1, &mut k7);
        stats.evaluations += 6;

        let mut err = 0.0;
        for i in 0..dim {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sk = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
            err += (e / sk) * (e / sk);
        }
        let err = (err / dim.max(1) as f64).sqrt();
        if !err.is_finite() {
            h *= 0.2;
            stats.rejected += 1;
            last_rejected = true;
            continue;
        }

        let fac = if err == 0.0 {
            10.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
        };
        if err <= 1.0 {
            for i in 0..dim {
                let ydiff = y1[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                cont[i] = [
                    y[i],
                    ydiff,
                    bspl,
                    ydiff - h * k7[i] - bspl,
                    h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]),
                ];
            }
            let t_new = if t + h >= t_end { t_end } else { t + h };
            while next_out < t_out.len() && t_out[next_out] <= t_new {
                let theta = if h > 0.0 { (t_out[next_out] - t) / h } else { 1.0 };
                let theta1 = 1.0 - theta;
                out.push(
                    cont.iter()
                        .map(|c| c[0] + theta * (c[1] + theta1 * (c[2] + theta * (c[3] + theta1 * c[4]))))
                        .collect(),
                );
                next_out += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            stats.accepted += 1;
            h *= if last_rejected { fac.min(1.0) } else { fac };
            last_rejected = false;
        } else {
            h *= fac.min(1.0);
            stats.rejected += 1;
            last_rejected = true;
        }
    }
    Ok((out, stats))
}

fn rms_scaled(v: &[f64], y: &[f64], opts: &Dopri5Options) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(v, y)| {
            let sk = opts.atol + opts.rtol * y.abs();
            (v / sk) * (v / sk)
        })
        .sum();
    (s / v.len().max(1) as f64).sqrt()
}

/// Starting step from the usual two-evaluation heuristic.
fn initial_step<Fn>(
    f: &mut Fn,
    t: f64,
    y: &[f64],
    f0: &[f64],
    span: f64,
    opts: &Dopri5Options,
    stats: &mut Dopri5Stats,
) -> f64
where
    Fn: FnMut(f64, &[f64], &mut [f64]),
{
    let d0 = rms_scaled(y, y, opts);
    let d1 = rms_scaled(f0, y, opts);
    let h0 = if d0 < 1e-10 || d1 < 1e-10 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(span.abs().max(1e-12));
    let y1: Vec<f64> = y.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y.len()];
    f(t + h0, &y1, &mut f1);
    stats.evaluations += 1;
    let df: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| (a - b) / h0).collect();
    let d2 = rms_scaled(&df, y, opts);
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span.abs().max(1e-12))
}
