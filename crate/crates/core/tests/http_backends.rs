use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use tracegraph::model::{Backend, ChatTurn, HttpBackend};
use tracegraph::retrieval::{EmbeddingProvider, HttpEmbeddingProvider};

struct Captured {
    head: String,
    body: serde_json::Value,
}

/// Serves one canned response per connection, in order, and hands back
/// what each request carried.
fn stub(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Captured {
                head,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

#[test]
fn chat_request_shape_and_reply() {
    let (url, rx) = stub(vec![(200, r#"{"choices":[{"message":{"content":"hello"}}]}"#.into())]);
    let backend = HttpBackend::new(url, "test-model", Some("secret".into())).unwrap();
    let turns = [
        ChatTurn::system("sys"),
        ChatTurn::user("question"),
        ChatTurn::assistant("call"),
        ChatTurn::tool("pop_next", "POPPED v1#0"),
    ];
    let reply = backend.complete(&turns, 0.5, &[]).unwrap();
    assert_eq!(reply.content, "hello");
    let req = rx.recv().unwrap();
    assert!(req.head.starts_with("POST /v1/chat"));
    assert!(req.head.to_ascii_lowercase().contains("authorization: bearer secret"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["temperature"], 0.5);
    let roles: Vec<&str> = req.body["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["system", "user", "assistant", "user"]);
    assert_eq!(
        req.body["messages"][3]["content"],
        "[tool result: pop_next]\nPOPPED v1#0"
    );
}

#[test]
fn chat_errors_are_classified() {
    let (url, _rx) = stub(vec![
        (503, "{}".into()),
        (400, "{}".into()),
        (200, r#"{"choices":[]}"#.into()),
    ]);
    let backend = HttpBackend::new(url, "m", None).unwrap();
    let turns = [ChatTurn::user("q")];
    let e = backend.complete(&turns, 1.0, &[]).unwrap_err();
    assert!(e.retryable, "{e:?}");
    let e = backend.complete(&turns, 1.0, &[]).unwrap_err();
    assert!(!e.retryable, "{e:?}");
    let e = backend.complete(&turns, 1.0, &[]).unwrap_err();
    assert!(!e.retryable && e.message.contains("choices"), "{e:?}");
}

#[test]
fn unreachable_server_is_transient() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(format!("http://127.0.0.1:{port}/"), "m", None).unwrap();
    let e = backend.complete(&[ChatTurn::user("q")], 1.0, &[]).unwrap_err();
    assert!(e.retryable);
}

#[test]
fn embedding_batch_round_trip_and_checks() {
    let (url, rx) = stub(vec![
        (200, r#"{"vectors":[[1.0,0.0],[0.0,1.0]]}"#.into()),
        (200, r#"{"vectors":[[1.0,0.0]]}"#.into()),
        (200, r#"{"vectors":[[1.0,0.0,2.0]]}"#.into()),
        (500, "{}".into()),
    ]);
    let p = HttpEmbeddingProvider::new(url, 2).unwrap();
    assert_eq!(p.dim(), 2);
    let v = p.embed_batch(&["a", "b"]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(rx.recv().unwrap().body, serde_json::json!({"texts": ["a", "b"]}));
    // count mismatch
    assert!(p.embed_batch(&["a", "b"]).is_err());
    // dimension mismatch
    assert!(p.embed("a").is_err());
    assert!(p.embed("a").is_err());
}
