fn main() {
    println!("guard CLI placeholder");
}
