//! HttpBackend against a scripted server on a local socket.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use serde_json::Value;

use synthfeed::error::GenError;
use synthfeed::genbackend::http::{HttpBackend, HttpConfig};
use synthfeed::genbackend::{Backend, GenRequest};

/// Serve one canned `(status, body)` per connection, forwarding each request
/// body to the returned channel.
fn serve(script: Vec<(u16, String)>) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(serde_json::from_slice(&buf).unwrap()).unwrap();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn backend(url: String, retries: u32) -> HttpBackend {
    HttpBackend::new(
        "http",
        HttpConfig {
            base_url: url,
            timeout_ms: 5_000,
            retries,
            backoff_ms: 1,
        },
    )
    .unwrap()
}

fn request(n: usize) -> GenRequest {
    GenRequest {
        n,
        seed: 17,
        stop: vec!["\nHuman:".into()],
        ..GenRequest::new("Human: hi\n\nAssistant:")
    }
}

#[test]
fn retries_server_errors_then_applies_stops() {
    let ok = r#"{"choices":[{"text":" hello\nHuman: more"},{"text":" bye"}]}"#;
    let (url, bodies) = serve(vec![(503, "busy".into()), (200, ok.into())]);
    let resp = backend(url, 2).generate(&request(2)).unwrap();
    let texts: Vec<&str> = resp.completions.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts, [" hello", " bye"]);

    let first = bodies.recv().unwrap();
    assert_eq!(
        first,
        bodies.recv().unwrap(),
        "retry must resend the same request"
    );
    assert_eq!(first["prompt"], "Human: hi\n\nAssistant:");
    assert_eq!(first["n"], 2);
    assert_eq!(first["seed"], 17);
    assert_eq!(first["max_tokens"], 384);
    assert_eq!(first["stop"][0], "\nHuman:");
}

#[test]
fn gives_up_after_the_retry_budget() {
    let (url, _bodies) = serve(vec![(500, "down".into()); 2]);
    match backend(url, 1).generate(&request(1)) {
        Err(GenError::Status {
            attempts, status, ..
        }) => {
            assert_eq!((attempts, status), (2, 500));
        }
        other => panic!("expected a status error, got {other:?}"),
    }
}

#[test]
fn wrong_choice_count_is_a_decode_error_without_retry() {
    let (url, bodies) = serve(vec![(200, r#"{"choices":[{"text":"a"}]}"#.into())]);
    let err = backend(url, 3).generate(&request(2)).unwrap_err();
    assert!(matches!(err, GenError::Decode(_)), "{err}");
    bodies.recv().unwrap();
    assert!(bodies.try_recv().is_err());
}
