fn main() {
    println!("mafin");
}
