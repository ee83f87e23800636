use std::net::TcpListener;
use std::time::{Duration, Instant};

use rust_decimal::Decimal;
use tabrule_core::restructure::{AnnotatedValue, ValueList};
use tabrule_core::sandbox::{Influence, OutcomeKind, PredNumber, ProgramSource, Sandbox, SandboxLimits};

fn item(category: &str, header: &str, v: &str) -> AnnotatedValue {
    AnnotatedValue {
        category: category.into(),
        header: header.into(),
        number_value: v.parse().unwrap(),
        raw_text: v.into(),
        scale_hint: None,
    }
}

fn values() -> ValueList {
    ValueList {
        doc_id: "t".into(),
        items: vec![item("Revenue", "2019", "120"), item("Revenue", "2018", "100"), item("Cost", "2019", "40")],
    }
}

fn sandbox(timeout: u64) -> Sandbox {
    Sandbox::new(SandboxLimits {
        timeout: Duration::from_secs(timeout),
        ..SandboxLimits::default()
    })
    .unwrap()
}

fn run(sb: &Sandbox, src: &str) -> tabrule_core::sandbox::ExecutionOutcome {
    sb.execute(&ProgramSource::python(src), &values())
}

#[test]
fn classification_battery() {
    let sb = sandbox(5);
    let cases: &[(&str, OutcomeKind)] = &[
        ("def run(v):\n    return (1.0, 'percent')\n", OutcomeKind::Value),
        ("def run(v)\n    return (1, '')\n", OutcomeKind::SyntaxError),
        ("def run(v):\n    return (1/0, '')\n", OutcomeKind::RuntimeError),
        ("def run(v):\n    return (1, 'a', 3)\n", OutcomeKind::ProtocolError),
        ("def run(v):\n    return 7\n", OutcomeKind::ProtocolError),
        ("def run(v):\n    return ('7', '')\n", OutcomeKind::ProtocolError),
        ("x = 1\n", OutcomeKind::RuntimeError),
        ("import os\ndef run(v):\n    os.fork()\n    return (1, '')\n", OutcomeKind::RuntimeError),
        ("import subprocess\ndef run(v):\n    subprocess.run(['true'])\n    return (1, '')\n", OutcomeKind::RuntimeError),
    ];
    for (src, want) in cases {
        let o = run(&sb, src);
        assert_eq!(o.kind, *want, "{src}: {o:?}");
        assert_eq!(o.kind == OutcomeKind::Value, o.scale_text.is_some());
    }
    let o = run(&sb, "def run(v):\n    return (1.0, 'percent')\n");
    assert_eq!(o.number, Some(PredNumber::Finite(Decimal::ONE)));
    assert_eq!(o.scale_text.as_deref(), Some("percent"));
}

#[test]
fn nan_and_infinity_are_values_with_the_nan_marker() {
    let sb = sandbox(5);
    for src in [
        "def run(v):\n    return (float('nan'), '')\n",
        "def run(v):\n    return (float('inf'), 'million')\n",
    ] {
        let o = run(&sb, src);
        assert_eq!(o.kind, OutcomeKind::Value);
        assert_eq!(o.number, Some(PredNumber::NaN));
    }
}

#[test]
fn file_writes_leave_no_trace() {
    let sb = sandbox(5);
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("written.txt");
    let src = format!(
        "def run(v):\n    with open({:?}, 'w') as f:\n        f.write('x')\n    return (1, '')\n",
        target.to_str().unwrap()
    );
    let o = run(&sb, &src);
    assert_eq!(o.kind, OutcomeKind::RuntimeError, "{o:?}");
    assert!(!target.exists());
    let relative = "def run(v):\n    open('here.txt', 'w').write('x')\n    return (1, '')\n";
    assert_eq!(run(&sb, relative).kind, OutcomeKind::RuntimeError);
}

#[test]
fn sockets_are_refused() {
    let sb = sandbox(5);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let port = listener.local_addr().unwrap().port();
    let src = format!(
        "import socket\ndef run(v):\n    s = socket.create_connection(('127.0.0.1', {port}))\n    s.sendall(b'hi')\n    return (1, '')\n"
    );
    let o = run(&sb, &src);
    assert_eq!(o.kind, OutcomeKind::RuntimeError, "{o:?}");
    std::thread::sleep(Duration::from_millis(200));
    assert!(listener.accept().is_err(), "the program reached the host listener");
}

#[test]
fn infinite_loop_times_out_on_schedule() {
    let sb = sandbox(2);
    let start = Instant::now();
    let o = run(&sb, "def run(v):\n    while True:\n        pass\n");
    let took = start.elapsed().as_secs_f64();
    assert_eq!(o.kind, OutcomeKind::Timeout);
    assert!((took - 2.0).abs() <= 1.0, "took {took:.2}s");
}

#[test]
fn execution_is_deterministic() {
    let sb = sandbox(5);
    let src = "def run(v):\n    return (sum(i['number_value'] for i in v) / 3, 'thousand')\n";
    assert_eq!(run(&sb, src), run(&sb, src));
}

#[test]
fn probe_reports_output_dependence() {
    let sb = sandbox(5);
    let vl = values();
    let ops: Vec<Decimal> = ["120", "100", "40", "7"].iter().map(|s| s.parse().unwrap()).collect();

    let constant = ProgramSource::python("def run(v):\n    return (5, '')\n");
    let infl = sb.sensitivity_probe(&constant, &vl, &ops[..3]);
    assert!(infl.iter().all(|i| i.influence == Influence::No));

    let total = ProgramSource::python("def run(v):\n    return (sum(i['number_value'] for i in v), '')\n");
    let infl = sb.sensitivity_probe(&total, &vl, &ops);
    let flags: Vec<Influence> = infl.iter().map(|i| i.influence).collect();
    assert_eq!(flags, vec![Influence::Yes, Influence::Yes, Influence::Yes, Influence::Unknown]);

    let only_2019 = ProgramSource::python(
        "def run(v):\n    return (sum(i['number_value'] for i in v if i['header'] == '2019'), '')\n",
    );
    let infl = sb.sensitivity_probe(&only_2019, &vl, &ops[..2]);
    assert_eq!(infl[0].influence, Influence::Yes);
    assert_eq!(infl[1].influence, Influence::No);
}
