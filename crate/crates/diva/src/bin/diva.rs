fn main() {
    println!("diva");
}
