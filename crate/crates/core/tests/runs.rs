use std::path::{Path, PathBuf};

use dkdm::harness::{distill, load_checkpoint, train_teacher, Config, Experiment, METRICS_HEADER};

const BASE: &str = "\
run.seed = 5
data.kind = mixture2d-rings
data.n = 1000
schedule.steps = 16
teacher.hidden = 24,24,24
teacher.time_dim = 8
student.hidden = 12,12,12
student.time_dim = 8
train.iterations = 120
train.batch = 16
distill.iterations = 80
distill.b = 8
distill.rho = 0.5
synth.n = 100
synth.steps = 8
eval.points = 4
eval.samples = 100
eval.projections = 8
log.wall_clock = false
";

fn experiment(dir: &Path, extra: &str) -> Experiment {
    let mut cfg = Config::parse(BASE, dir).unwrap();
    for line in extra.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim());
    }
    Experiment::from_config(cfg).unwrap()
}

fn teacher(dir: &Path) -> PathBuf {
    let exp = experiment(dir, "run.out_dir = teacher_run\n");
    train_teacher(&exp).unwrap();
    dir.join("teacher_run").join("teacher")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

#[test]
fn simple_mode_leaves_vlb_empty() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(
        dir.path(),
        "run.out_dir = s\ntrain.loss_mode = simple\ntrain.iterations = 10\n",
    );
    train_teacher(&exp).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("s/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    for l in lines {
        assert_eq!(l.split(',').nth(2), Some(""), "{l}");
    }
}

#[test]
fn reruns_reproduce_metrics_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let t = teacher(dir.path());
    for strategy in ["dynamic", "synthetic_dataset"] {
        let mut csvs = Vec::new();
        for run in ["r1", "r2"] {
            let exp = experiment(
                dir.path(),
                &format!(
                    "run.out_dir = {run}\nteacher.checkpoint = {}\ndistill.strategy = {strategy}\n",
                    t.display()
                ),
            );
            distill(&exp).unwrap();
            csvs.push(std::fs::read(dir.path().join(run).join("metrics.csv")).unwrap());
        }
        assert_eq!(csvs[0], csvs[1], "{strategy}");
    }
}

fn resume_matches(dir: &Path, strategy: &str, teacher_run: bool) {
    let t = if teacher_run {
        None
    } else {
        Some(teacher(dir))
    };
    let extra = |out: &str, resume: bool| {
        let mut s = format!(
            "run.out_dir = {out}\nrun.resume = {resume}\ntrain.checkpoint_every = 60\ndistill.checkpoint_every = 40\n"
        );
        if let Some(t) = &t {
            s.push_str(&format!(
                "teacher.checkpoint = {}\ndistill.strategy = {strategy}\n",
                t.display()
            ));
        }
        s
    };
    let go = |exp: &Experiment| {
        if teacher_run {
            train_teacher(exp).unwrap();
        } else {
            distill(exp).unwrap();
        }
    };
    let model_dir = if teacher_run { "teacher" } else { "student" };

    let full = experiment(dir, &extra("full", false));
    go(&full);

    // a second directory holding only the midway state, as after a crash
    let part = dir.join("part");
    copy_dir(&dir.join("full/state"), &part.join("state"));
    std::fs::copy(dir.join("full/metrics.csv"), part.join("metrics.csv")).unwrap();
    if dir.join("full/synthetic.dkds").exists() {
        std::fs::copy(dir.join("full/synthetic.dkds"), part.join("synthetic.dkds")).unwrap();
    }
    let resumed = experiment(dir, &extra("part", true));
    go(&resumed);

    assert_eq!(
        std::fs::read(dir.join("full/metrics.csv")).unwrap(),
        std::fs::read(dir.join("part/metrics.csv")).unwrap(),
        "{strategy}"
    );
    let (a, _) = load_checkpoint(&dir.join("full").join(model_dir)).unwrap();
    let (b, _) = load_checkpoint(&dir.join("part").join(model_dir)).unwrap();
    assert_eq!(a, b, "{strategy}");
}

#[test]
fn teacher_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    resume_matches(dir.path(), "", true);
}

#[test]
fn distill_resume_is_bit_exact() {
    for strategy in ["dynamic", "iterative", "synthetic_dataset"] {
        let dir = tempfile::tempdir().unwrap();
        resume_matches(dir.path(), strategy, false);
    }
}

#[test]
fn cross_architecture_students_train() {
    let dir = tempfile::tempdir().unwrap();
    let base = "data.kind = shapes8x8\ndata.n = 200\nteacher.arch = cnn\nteacher.hidden = 4,4\nstudent.arch = mlp\nstudent.hidden = 16,16\ntrain.iterations = 20\ndistill.iterations = 20\n";
    let exp = experiment(dir.path(), &format!("{base}run.out_dir = t\n"));
    train_teacher(&exp).unwrap();
    let exp = experiment(
        dir.path(),
        &format!("{base}run.out_dir = s\nteacher.checkpoint = t/teacher\n"),
    );
    let s = distill(&exp).unwrap();
    assert!(s.metrics.iter().all(|(_, v)| v.is_finite()));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "cfg") {
            Experiment::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}
