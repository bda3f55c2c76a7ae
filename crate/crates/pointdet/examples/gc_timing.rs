fn main() {
    let t = std::time::Instant::now();
    for r in pointdet::gradcheck::run_all(100, 0) {
        println!("{}", r.line());
    }
    println!("total: {:.1}s", t.elapsed().as_secs_f64());
}
