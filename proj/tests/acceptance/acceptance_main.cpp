#include <iostream>
int main(int argc, char** argv) { (void)argc; (void)argv; std::cout << "stub\n"; return 1; }
