//! Goal pools on disk: one PPM per example plus `manifest.csv` listing the
//! generating states.

use std::fmt::Write as _;
use std::path::Path;

use crate::env::{render, EnvState, Image, ObsMode, Pose, TaskId};
use crate::vice::GoalPool;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";
const HEADER: &str = "index,file,task,bead0,bead1,bead2,bead3,pusher,valve_angle,x,y,theta";

fn file_name(i: usize) -> String {
    format!("goal_{i:04}.ppm")
}

pub fn save_goal_pool(pool: &GoalPool, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for (i, f) in pool.frames().iter().enumerate() {
        let s = &f.state;
        let name = file_name(i);
        std::fs::write(dir.join(&name), render(s).to_ppm())?;
        let b = s.beads;
        let o = s.object;
        writeln!(
            manifest,
            "{i},{name},{},{},{},{},{},{},{},{},{},{}",
            s.task, b[0], b[1], b[2], b[3], s.pusher, s.valve_angle, o.x, o.y, o.theta
        )
        .expect("writing to a string");
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn parse_row(line: &str, lineno: usize) -> Result<(String, EnvState)> {
    let bad = |what: &str| Error::Invalid(format!("{MANIFEST} line {lineno}: {what}"));
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 12 {
        return Err(bad("expected 12 columns"));
    }
    let num = |k: usize| cols[k].parse::<f64>().map_err(|_| bad("unparseable number"));
    let task: TaskId = cols[2].parse()?;
    let state = EnvState {
        task,
        beads: [num(3)?, num(4)?, num(5)?, num(6)?],
        pusher: num(7)?,
        valve_angle: num(8)?,
        object: Pose {
            x: num(9)?,
            y: num(10)?,
            theta: num(11)?,
        },
    };
    Ok((cols[1].to_string(), state))
}

/// Reads a pool back, checking every stored image against a fresh render
/// of its state.
pub fn load_goal_pool(dir: &Path, task: TaskId, mode: ObsMode) -> Result<GoalPool> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Invalid(format!("{MANIFEST} has an unexpected header")));
    }
    let mut states = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let (file, state) = parse_row(line, k + 2)?;
        let image = Image::from_ppm(&std::fs::read(dir.join(&file))?)
            .ok_or_else(|| Error::Invalid(format!("{file} is not a 32x32 PPM")))?;
        if image != render(&state) {
            return Err(Error::Invalid(format!("{file} does not match its manifest state")));
        }
        states.push(state);
    }
    GoalPool::from_states(task, &states, mode)
}
