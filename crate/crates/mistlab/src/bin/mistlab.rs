fn main() {
    println!("mistlab");
}
