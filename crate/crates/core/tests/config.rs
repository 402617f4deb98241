use local_games::config::{Cell, Config};
use local_games::dynamics::Dynamics;
use local_games::selection::SelectionScheme;
use local_games::Error;

fn config_error(text: &str) -> (String, String) {
    let err = Config::parse(text).and_then(|c| c.validate().map(|_| c)).unwrap_err();
    match err {
        Error::Config { path, message } => (path, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_file_gives_defaults() {
    let c = Config::parse("").unwrap();
    assert_eq!(c, Config::default());
    assert_eq!(c.scenario.grid, "3x3");
    assert_eq!(c.scenario.spacing, 2.0);
    assert_eq!(c.scenario.steps, 150);
    assert_eq!(c.scenario.runs, 20);
    assert_eq!(c.planner.horizon, 10);
    assert_eq!(c.sweep.p, vec![1, 2, 3, 4]);
    assert_eq!(c.dynamics.dt, 0.1);
    assert_eq!(c.repulsion_radius(), 0.8);
    assert_eq!(c.cost.mu, 10.0);
    assert_eq!(c.solver.tolerance, 1e-6);
    assert!(matches!(c.dynamics().unwrap(), Dynamics::DoubleIntegrator));
}

#[test]
fn default_sweep_needs_kappa() {
    let (path, message) = config_error("");
    assert_eq!(path, "selection.kappa");
    assert!(message.contains("missing"), "{message}");
}

#[test]
fn kappa_only_needed_for_barrier_schemes() {
    let c = Config::parse("[sweep]\nschemes = [\"nn\", \"ce\", \"jacobian\", \"hessian\"]\n").unwrap();
    c.validate().unwrap();
    let c = Config::parse("[sweep]\nschemes = [\"nn\", \"cbf\"]\n").unwrap();
    assert!(c.validate().is_err());
    c.validate_for(&[SelectionScheme::NearestNeighbor]).unwrap();
}

#[test]
fn full_example_parses() {
    let text = r#"
[scenario]
grid = "3x3x3"
spacing = 2.5
steps = 40
seed = 7
runs = 3

[dynamics]
dt = 0.05

[dynamics.quadrotor]
mass = 1.2
inertia = [0.02, 0.02, 0.03]

[cost]
mu = 20.0
repulsion_radius = 1.0

[constraints]
min_distance = 0.1
control_lower = [0.0, 0.0, 0.0, 0.0]
control_upper = [10.0, 10.0, 10.0, 10.0]

[solver]
tolerance = 1e-5
symmetry_breaking = false

[planner]
horizon = 8
replan_period = 2
warm_start = false

[selection]
kappa = 3.0
fd_step = 1e-5

[sweep]
schemes = ["nn", "cbf"]
p = [2, 3]
full_game = true

[output]
trajectories = true
"#;
    let c = Config::parse(text).unwrap();
    c.validate().unwrap();
    assert_eq!(c.seeds(), vec![7, 8, 9]);
    let sc = c.scenario_config().unwrap();
    assert_eq!(sc.grid.num_agents(), 27);
    assert_eq!(sc.repulsion_radius, 1.0);
    assert_eq!(sc.discretization.dt, 0.05);
    assert!(matches!(&sc.dynamics, Dynamics::Quadrotor(_)));
    assert!(sc.constraints.control_bounds.is_some());

    let schemes = c.schemes().unwrap();
    let cells = c.cells(&schemes, &c.sweep.p).unwrap();
    assert_eq!(cells.len(), 5);
    assert_eq!(cells.last(), Some(&Cell { scheme: None, p: 26 }));
    let pc = c.planner_config(cells[1]);
    assert_eq!(pc.players, 3);
    assert_eq!(pc.horizon, 8);
    assert_eq!(pc.replan_period, 2);
    assert!(!pc.warm_start);
    assert!(!pc.solver.symmetry_breaking);
    assert_eq!(pc.selection.kappa, 3.0);
    assert_eq!(pc.selection.mu, 20.0);
    assert_eq!(pc.selection.radius, 1.0);
}

#[test]
fn errors_name_the_field() {
    let cases = [
        ("[selection]\nkappa = \"five\"\n", "selection.kappa"),
        ("[selection]\nkappa = -1.0\n", "selection.kappa"),
        ("[scenario]\ngrid = \"3by3\"\n[selection]\nkappa = 5.0\n", "scenario.grid"),
        ("[scenario]\nspacing = 0.0\n[selection]\nkappa = 5.0\n", "scenario.spacing"),
        ("[scenario]\nrunz = 3\n", "scenario.runz"),
        ("[cost]\nmu = -1.0\n[selection]\nkappa = 5.0\n", "cost.mu"),
        ("[dynamics]\nmodel = \"bicycle\"\n[selection]\nkappa = 5.0\n", "dynamics.model"),
        ("[sweep]\nschemes = [\"nn\", \"xyz\"]\n", "sweep.schemes[1]"),
        ("[planner]\nhorizon = 1\n[selection]\nkappa = 5.0\n", "planner.horizon"),
        ("[solver]\ntolerance = 0.0\n[selection]\nkappa = 5.0\n", "solver"),
        ("[constraints]\ncontrol_lower = [-1.0, -1.0]\n[selection]\nkappa = 5.0\n", "constraints.control_upper"),
        ("[constraints]\ncontrol_lower = [-1.0]\ncontrol_upper = [1.0]\n[selection]\nkappa = 5.0\n", "constraints.control_lower"),
        ("[scenario]\ngrid = \"2x2x2\"\n[dynamics]\nmodel = \"double_integrator\"\n[selection]\nkappa = 5.0\n", "scenario.grid"),
    ];
    for (text, expected) in cases {
        let (path, message) = config_error(text);
        assert_eq!(path, expected, "{text} -> {message}");
        assert!(!message.is_empty());
    }
}

#[test]
fn syntax_errors_are_config_errors() {
    let err = Config::parse("[scenario\n").unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err:?}");
}

#[test]
fn load_reports_missing_file() {
    let err = Config::load(std::path::Path::new("/nonexistent/experiment.toml")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn quadrotor_defaults_to_motor_limits() {
    let c = Config::parse("[scenario]\ngrid = \"3x3x3\"\n").unwrap();
    let bounds = c.scenario_config().unwrap().constraints.control_bounds.unwrap();
    assert_eq!(bounds.lower.as_slice(), &[0.0; 4]);
    assert!(bounds.upper.iter().all(|&h| (h - 4.0 * 9.81 / 4.0).abs() < 1e-12));
    let c = Config::parse("").unwrap();
    assert!(c.scenario_config().unwrap().constraints.control_bounds.is_none());
}
