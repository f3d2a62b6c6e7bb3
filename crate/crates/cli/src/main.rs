fn main() {
    println!("stmrecon");
}
