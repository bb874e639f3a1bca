//! A tiny scriptable HTTP/1.1 server for exercising the live adapters
//! without external services. Routes are matched by path prefix; every
//! request body is recorded for later assertions.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// One scripted route: requests whose path starts with `path_prefix` get
/// `status` and `body` back.
#[derive(Clone, Debug)]
pub struct Route {
    pub path_prefix: String,
    pub status: u16,
    pub body: String,
}

impl Route {
    pub fn json(path_prefix: &str, body: serde_json::Value) -> Self {
        Route { path_prefix: path_prefix.to_string(), status: 200, body: body.to_string() }
    }
}

/// A recorded exchange.
#[derive(Clone, Debug)]
pub struct Exchange {
    pub method: String,
    pub path: String,
    pub body: String,
}

impl Exchange {
    pub fn json_body(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

pub struct StubServer {
    addr: std::net::SocketAddr,
    exchanges: Arc<Mutex<Vec<Exchange>>>,
    shutdown: Arc<Mutex<bool>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Start a server answering with the given routes. Unmatched paths get
    /// a 404. `failures_before_success` makes the first N requests fail
    /// with a 500, for retry-policy tests.
    pub fn start(routes: Vec<Route>, failures_before_success: usize) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().expect("local addr");
        let exchanges: Arc<Mutex<Vec<Exchange>>> = Arc::new(Mutex::new(Vec::new()));
        let shutdown = Arc::new(Mutex::new(false));
        let remaining_failures = Arc::new(Mutex::new(failures_before_success));

        let thread_exchanges = Arc::clone(&exchanges);
        let thread_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            let mut backlog: VecDeque<TcpStream> = VecDeque::new();
            loop {
                if *thread_shutdown.lock().unwrap() {
                    break;
                }
                match listener.accept() {
                    Ok((stream, _)) => backlog.push_back(stream),
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(std::time::Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
                while let Some(stream) = backlog.pop_front() {
                    let _ = handle_connection(
                        stream,
                        &routes,
                        &thread_exchanges,
                        &remaining_failures,
                    );
                }
            }
        });

        StubServer { addr, exchanges, shutdown, handle: Some(handle) }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.exchanges.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        *self.shutdown.lock().unwrap() = true;
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    routes: &[Route],
    exchanges: &Arc<Mutex<Vec<Exchange>>>,
    remaining_failures: &Arc<Mutex<usize>>,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(std::time::Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);

    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body)?;
    }
    exchanges.lock().unwrap().push(Exchange {
        method,
        path: path.clone(),
        body: String::from_utf8_lossy(&body).to_string(),
    });

    let (status, reply) = {
        let mut failures = remaining_failures.lock().unwrap();
        if *failures > 0 {
            *failures -= 1;
            (500u16, "{\"error\":\"scripted failure\"}".to_string())
        } else {
            match routes.iter().find(|r| path.starts_with(&r.path_prefix)) {
                Some(route) => (route.status, route.body.clone()),
                None => (404, format!("{{\"error\":\"no route for {path}\"}}")),
            }
        }
    };

    let response = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        status,
        if status == 200 { "OK" } else { "Error" },
        reply.len(),
        reply
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}
