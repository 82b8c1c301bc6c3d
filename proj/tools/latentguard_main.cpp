#include <cstdio>

int main() {
    std::puts("latentguard: not yet wired");
    return 0;
}
