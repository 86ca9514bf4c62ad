use std::fmt::Write;

use super::grid::GridEnv;
use super::spec::Pos;

/// ASCII view: `A<i>` agents, `T<k>` treasure grids, `B<k>` banks,
/// `L<k>` landmarks, `##` obstacles, `.` empty. Agents are drawn on top.
pub fn render(env: &GridEnv) -> String {
    let spec = env.spec();
    let st = env.state();
    let mut out = String::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let p = Pos::new(x, y);
            let token = if let Some(i) = st.positions.iter().position(|q| *q == p) {
                format!("A{i}")
            } else if spec.is_obstacle(p) {
                "##".to_string()
            } else if let Some(k) = st.treasure_pos.iter().position(|q| *q == p) {
                format!("T{k}")
            } else if let Some(k) = st.bank_pos.iter().position(|q| *q == p) {
                format!("B{k}")
            } else if let Some(k) = st.landmarks.iter().position(|q| *q == p) {
                format!("L{k}")
            } else {
                ".".to_string()
            };
            let _ = write!(out, "{token:<4}");
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;

    #[test]
    fn renders_every_object_kind() {
        let mut spec = EnvSpec::grid_treasure(5, 4, 2);
        spec.obstacles = vec![Pos::new(0, 3)];
        spec.agent_cells = Some(vec![Pos::new(0, 0), Pos::new(4, 0)]);
        let (env, _) = GridEnv::reset(&spec, 0).unwrap();
        let s = render(&env);
        assert_eq!(
            s,
            "A0  .   .   .   A1\n.   .   T0  .   .\n.   .   B0  .   .\n##  .   .   .   .\n"
        );
    }
}
