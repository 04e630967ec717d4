use std::io::Write;

use super::{TimeGrid, Trajectory};
use crate::geometry::{CostateVec, Layout};

fn header(
    w: &mut impl Write,
    layout: &Layout,
    lead: &str,
    xs: &str,
    ls: &str,
) -> std::io::Result<()> {
    let cols: Vec<String> = ["t".to_string(), "particle".to_string()]
        .into_iter()
        .chain((0..layout.d).map(|j| format!("{xs}{j}")))
        .chain((0..layout.n).map(|j| format!("{ls}{j}")))
        .collect();
    writeln!(w, "# {lead}; columns: {}", cols.join(", "))?;
    writeln!(w, "{}", cols.join(","))
}

fn row(
    w: &mut impl Write,
    t: f64,
    i: usize,
    values: impl Iterator<Item = f64>,
) -> std::io::Result<()> {
    write!(w, "{t:.16e},{i}")?;
    for v in values {
        write!(w, ",{v:.16e}")?;
    }
    writeln!(w)
}

/// One row per node and particle: `t, particle, x0.., lam0..`, 17 significant digits.
pub fn write_trajectory_csv(traj: &Trajectory, w: &mut impl Write) -> std::io::Result<()> {
    let layout = traj.states[0].layout;
    header(w, &layout, "particle states at grid nodes", "x", "lam")?;
    for (k, mu) in traj.states.iter().enumerate() {
        let t = traj.grid.time(k);
        for (i, c) in mu.particles.iter().enumerate() {
            row(w, t, i, c.x.iter().chain(&c.lam).copied())?;
        }
    }
    Ok(())
}

/// One row per node and particle: `t, particle, px0.., plam0..`.
pub fn write_costates_csv(
    grid: &TimeGrid,
    layout: &Layout,
    costates: &[Vec<CostateVec>],
    w: &mut impl Write,
) -> std::io::Result<()> {
    header(
        w,
        layout,
        "costates at grid nodes (mean-zero label part)",
        "px",
        "plam",
    )?;
    for (k, ps) in costates.iter().enumerate() {
        let t = grid.time(k);
        for (i, p) in ps.iter().enumerate() {
            row(w, t, i, p.px.iter().chain(&p.plam).copied())?;
        }
    }
    Ok(())
}
