use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use tabrule_core::agent::{
    extract_program, Agent, GenerationRequest, Generator, ModelConfig, ModelError, OllamaClient, PromptBundle, PromptTemplate, ResponseCache, ThinkPlacement,
};

const SYSTEM: &str = "You will receive the financial report as an annotated value list and the question. \nYour task is to generate a Python function that can calculate a numeric value that is the answer for the received question. ";

const BASE_HUMAN: &str = "VALUE_LIST: {value_list}\n\nQUESTION: {question}\n\nGenerate a Python function 'run(value_list)' that can answer the question using the list of annotated values! \nThe function must return a tuple (number, scale). The resulting number is a float with accuracy to two decimal places. Scale usually is thousand, million, billion, percent or an empty string. \n\nDo not generate explanation, nor example code, just the function. ";

const FINAL_RULES: [&str; 3] = [
    "If the question is about calculating the year average, you must calculate the average between the given year and the previous one. ex. 2015_average = (2015_value + 2014_value)/2",
    "'percentage change' results 'percent' scale",
    "'change in percentage' is a subtraction",
];

fn plain() -> PromptTemplate {
    PromptTemplate {
        think: ThinkPlacement::Off,
        ..PromptTemplate::default()
    }
}

#[test]
fn base_prompt_is_byte_exact() {
    let b = plain().render("{value_list}", "{question}", &[]);
    assert_eq!(b.system_text, SYSTEM);
    assert_eq!(b.human_text, BASE_HUMAN);
}

#[test]
fn final_prompt_with_three_rules_is_byte_exact() {
    let rules: Vec<String> = FINAL_RULES.iter().map(|s| s.to_string()).collect();
    let b = plain().render("{value_list}", "{question}", &rules);
    let expected = format!(
        "VALUE_LIST: {{value_list}}\n\nQUESTION: {{question}}\n\nGenerate a Python function 'run(value_list)' that can answer the question using the list of annotated values! \nThe function must return a tuple (number, scale). The resulting number is a float with accuracy to two decimal places. Scale usually is thousand, million, billion, percent or an empty string. \n\n{}\n\n{}\n\n{}\n\nDo not generate explanation, nor example code, just the function. ",
        FINAL_RULES[0], FINAL_RULES[1], FINAL_RULES[2]
    );
    assert_eq!(b.human_text, expected);
    assert_eq!(b.system_text, SYSTEM);
}

#[test]
fn no_think_token_follows_the_human_text() {
    let b = PromptTemplate::default().render("[]", "q", &[]);
    assert!(b.human_text.ends_with("just the function. \n/no_think"));
    assert!(b.think_suppressed);
}

fn rule_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::btree_set("[a-zA-Z'%][a-zA-Z0-9 '%().,=_-]{0,40}", 0..6).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn rules_keep_order_and_appear_once(rules in rule_strategy(), question in "[a-zA-Z ?{}]{1,30}", values in "\\[[a-z{}:\" ,0-9]{0,30}\\]") {
        let b = plain().render(&values, &question, &rules);
        let anchor = "or an empty string. \n\n";
        let mut cursor = b.human_text.find(anchor).unwrap() + anchor.len();
        for r in &rules {
            let needle = format!("{r}\n\n");
            let pos = b.human_text[cursor..].find(&needle);
            prop_assert!(pos.is_some(), "rule {:?} missing or out of order", r);
            cursor += pos.unwrap() + needle.len();
        }
        let tail = &b.human_text[cursor..];
        prop_assert!(tail.starts_with("Do not generate"));
        prop_assert_eq!(b.human_text.matches("VALUE_LIST: ").count(), 1);
        let expected_prefix = format!("VALUE_LIST: {values}\n\nQUESTION: {question}\n\n");
        prop_assert!(b.human_text.starts_with(&expected_prefix));
        // Removing the rule block gives back the filled base prompt.
        let block: String = rules.iter().map(|r| format!("{r}\n\n")).collect();
        let without = b.human_text.replacen(&block, "", 1);
        prop_assert_eq!(without, plain().render(&values, &question, &[]).human_text);
    }
}

/// Minimal HTTP/1.1 server answering each request with the next scripted
/// (status, body) pair and recording request bodies.
fn mock_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<serde_json::Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null));
            let mut stream = stream;
            let _ = write!(stream, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
        }
    });
    (addr, seen)
}

fn bundle() -> PromptBundle {
    PromptTemplate::default().render("[]", "What is 1?", &[])
}

fn config(endpoint: String) -> ModelConfig {
    ModelConfig {
        endpoint,
        retries: 2,
        backoff_ms: 1,
        timeout_secs: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn chat_request_shape_and_response_parsing() {
    let reply = serde_json::json!({"message": {"role": "assistant", "content": "<think></think>```python\ndef run(v):\n    return (1, '')\n```"}}).to_string();
    let (addr, seen) = mock_server(vec![(200, reply)]);
    let client = OllamaClient::new(config(addr)).unwrap();
    let p = bundle();
    let out = client
        .generate(&GenerationRequest {
            instance_id: "q1",
            prompt: &p,
            rules: &[],
        })
        .unwrap();
    assert_eq!(extract_program(&out).unwrap(), "def run(v):\n    return (1, '')\n");
    let req = &seen.lock().unwrap()[0];
    assert_eq!(req["model"], "qwen3:4b-q4_K_M");
    assert_eq!(req["stream"], false);
    assert_eq!(req["options"]["temperature"], 0.0);
    assert_eq!(req["messages"][0]["role"], "system");
    assert_eq!(req["messages"][1]["content"], p.human_text.as_str());
}

#[test]
fn server_errors_are_retried_then_reported() {
    let ok = serde_json::json!({"message": {"content": "def run(v):\n    return (2, '')\n"}}).to_string();
    let (addr, seen) = mock_server(vec![(503, "busy".into()), (200, ok)]);
    let client = OllamaClient::new(config(addr)).unwrap();
    let p = bundle();
    let req = GenerationRequest {
        instance_id: "q",
        prompt: &p,
        rules: &[],
    };
    assert!(client.generate(&req).unwrap().contains("return (2"));
    assert_eq!(seen.lock().unwrap().len(), 2);

    let (addr, _) = mock_server(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let err = OllamaClient::new(config(addr)).unwrap().generate(&req).unwrap_err();
    match err {
        ModelError::Exhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, ModelError::Http { status: 500, .. }));
        }
        other => panic!("unexpected {other:?}"),
    }

    let (addr, _) = mock_server(vec![(400, "bad model".into())]);
    let err = OllamaClient::new(config(addr)).unwrap().generate(&req).unwrap_err();
    assert!(matches!(err, ModelError::Http { status: 400, .. }));

    let (addr, _) = mock_server(vec![(200, "{\"done\": true}".into())]);
    let err = OllamaClient::new(config(addr)).unwrap().generate(&req).unwrap_err();
    assert!(matches!(err, ModelError::Protocol { .. }));
}

#[test]
fn persistent_cache_serves_repeats_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let body = serde_json::json!({"message": {"content": "def run(v):\n    return (3, '')\n"}}).to_string();
    let (addr, seen) = mock_server(vec![(200, body)]);
    let p = bundle();
    let req = GenerationRequest {
        instance_id: "q",
        prompt: &p,
        rules: &[],
    };
    {
        let client: Arc<dyn Generator> = Arc::new(OllamaClient::new(config(addr.clone())).unwrap());
        let agent = Agent::new(client).with_cache(Arc::new(ResponseCache::open(&path).unwrap()));
        let a = agent.respond(&req).unwrap();
        assert_eq!(agent.respond(&req).unwrap(), a);
    }
    let client: Arc<dyn Generator> = Arc::new(OllamaClient::new(config(addr)).unwrap());
    let agent = Agent::new(client).with_cache(Arc::new(ResponseCache::open(&path).unwrap()));
    assert!(agent.respond(&req).unwrap().contains("return (3"));
    assert_eq!(seen.lock().unwrap().len(), 1);
}
